"""
Simulation API endpoints.
"""
from fastapi import APIRouter, HTTPException, status

from backend.app.core.errors import Divergence, MismatchedPlantDelay, NonIntegerDelay, PlatoonError
from backend.app.models.schemas import ControllerRequest, SimulationSummary
from backend.app.services import workflows

router = APIRouter(prefix="/simulation")


@router.post("/run", response_model=SimulationSummary)
def run_simulation(request: ControllerRequest) -> SimulationSummary:
    """
    Simulate the scenario's inputs against a designed controller.

    Returns the time-domain metrics (peaks, settling times, downstream
    amplification) and, for sinusoidal inputs, the steady-state gains next
    to the closed-loop frequency response. Trajectories are not returned;
    use the CLI to export them.
    """
    try:
        _, summary = workflows.simulate_workflow(request.scenario, request.controller)
        return summary
    except (NonIntegerDelay, MismatchedPlantDelay, ValueError) as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e)
        )
    except Divergence as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Simulation diverged: {str(e)}"
        )
    except PlatoonError as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Internal error: {str(e)}"
        )
