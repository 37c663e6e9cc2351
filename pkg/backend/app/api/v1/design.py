"""
Design API endpoints.
Controller synthesis and the verify battery.
"""
from fastapi import APIRouter, HTTPException, status

from backend.app.core.errors import DesignError, TransferFunctionError
from backend.app.models.schemas import ControllerRequest, SynthRequest, SynthResponse, VerifyReport
from backend.app.services import workflows

router = APIRouter(prefix="/design")


@router.post("/synth", response_model=SynthResponse)
def synth_controller(request: SynthRequest) -> SynthResponse:
    """
    Design the leader-information controller for a scenario.

    The optional `norm` overrides the scenario's design norm. Runs the n
    local model-matching problems and returns the controller document
    together with the certified local norms.

    Examples:
        Request:
        ```json
        {
            "scenario": {
                "name": "pair",
                "platoon": {"n": 2, "vehicles": [
                    {"mass_kg": 8, "actuator_tau_s": 0.1, "zero_sigma": 1},
                    {"mass_kg": 4, "actuator_tau_s": 0.2, "zero_sigma": 2}
                ]}
            },
            "norm": "h2"
        }
        ```
    """
    try:
        scenario = workflows.apply_overrides(request.scenario, norm=request.norm)
        outcome = workflows.synth(scenario)
        return SynthResponse(controller=outcome.document, report=outcome.report)
    except (DesignError, TransferFunctionError) as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Design error: {str(e)}"
        )
    except ValueError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e)
        )


@router.post("/verify", response_model=VerifyReport)
def verify_controller(request: ControllerRequest) -> VerifyReport:
    """Bézout identity, structural zeros, S-membership and string-stability bounds."""
    try:
        return workflows.verify(request.scenario, request.controller)
    except (DesignError, TransferFunctionError) as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Design error: {str(e)}"
        )
    except ValueError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e)
        )
