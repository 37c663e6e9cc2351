"""API v1 routes."""
from fastapi import APIRouter
from .design import router as design_router
from .simulation import router as simulation_router

router = APIRouter(prefix="/v1")

# Include sub-routers
router.include_router(design_router, tags=["design"])
router.include_router(simulation_router, tags=["simulation"])
