"""
Data models and schemas using Pydantic.
Defines vehicle parameters, the JSON scenario file, the controller document
and the reports produced by synth / verify / simulate.
"""
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator
from typing import Dict, List, Literal, Optional
from datetime import datetime
from enum import Enum


class NormKind(str, Enum):
    """Design norm for the local model-matching problems."""
    H2 = "h2"
    HINF = "hinf"


class SignalKind(str, Enum):
    """Input signal shapes for leader control and disturbances."""
    PULSE = "pulse"          # rectangular pulse on [start_s, end_s)
    STEP = "step"            # amplitude from start_s on
    SINE = "sine"            # amplitude·sin(ω(t − start_s)) from start_s on
    TRAPEZOID = "trapezoid"  # pulse with linear ramps of ramp_s


class _Strict(BaseModel):
    """Scenario sections reject unknown keys."""
    model_config = ConfigDict(extra="forbid")


# ============================================================================
# Vehicles and spacing policy
# ============================================================================

class VehicleParams(_Strict):
    """
    One vehicle: Φ_k = (s+σ_k)/(m_k(τ_k s+1)) plus delays.
    index 0 is the leader.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    index: int = Field(..., ge=0, description="0 = leader, 1..n followers")
    mass_kg: float = Field(..., gt=0, description="Vehicle mass m_k")
    actuator_tau_s: float = Field(..., gt=0, description="Actuator time constant τ_k")
    zero_sigma: float = Field(..., gt=0, description="Zero location σ_k (1/s)")
    actuation_delay_s: float = Field(0.0, ge=0, description="Actuator delay φ")
    comm_delay_s: float = Field(0.0, ge=0, description="Wireless delay θ")


class Headway(_Strict):
    """Time headway spacing policy H(s) = hs + 1; h = 0 is constant spacing."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    h_seconds: float = Field(0.0, ge=0, description="Time headway h")


# ============================================================================
# Scenario file
# ============================================================================

class VehicleEntry(_Strict):
    """Physical parameters of one vehicle in the scenario file."""
    mass_kg: float = Field(..., gt=0)
    actuator_tau_s: float = Field(..., gt=0)
    zero_sigma: float = Field(..., gt=0, description="Zero location σ (1/s)")


class PlantSpec(_Strict):
    """Nominal plant G_wp as ascending coefficient lists (default 1/s²)."""
    num: List[float] = Field(default_factory=lambda: [1.0], description="Ascending numerator coefficients")
    den: List[float] = Field(default_factory=lambda: [0.0, 0.0, 1.0], description="Ascending denominator coefficients")
    absorb_delay: bool = Field(True, description="Multiply G_wp by the Padé approximant of the loop delay")

    @model_validator(mode='after')
    def validate_strictly_proper(self):
        """G_wp must be strictly proper with a nonzero denominator."""
        def degree(c):
            nz = [i for i, v in enumerate(c) if v != 0.0]
            return nz[-1] if nz else -1
        if degree(self.den) < 0:
            raise ValueError('g_wp denominator is identically zero')
        if degree(self.num) < 0:
            raise ValueError('g_wp numerator is identically zero')
        if degree(self.num) >= degree(self.den):
            raise ValueError('g_wp must be strictly proper')
        return self


class PlatoonSection(_Strict):
    """Platoon description: leader, n followers, headway and nominal plant."""
    n: int = Field(..., ge=1, description="Number of followers")
    leader: VehicleEntry = Field(
        default_factory=lambda: VehicleEntry(mass_kg=1.0, actuator_tau_s=0.1, zero_sigma=1.0))
    vehicles: List[VehicleEntry] = Field(..., min_length=1, description="Followers 1..n")
    h_s: float = Field(0.0, ge=0, description="Time headway h")
    g_wp: PlantSpec = Field(default_factory=PlantSpec)
    pade_order: int = Field(3, ge=1, le=10)
    delta_m: float = Field(0.0, ge=0, description="Standstill spacing Δ (informational)")

    @model_validator(mode='after')
    def validate_vehicle_count(self):
        """vehicles must list exactly n followers."""
        if len(self.vehicles) != self.n:
            raise ValueError(f'expected {self.n} vehicles, got {len(self.vehicles)}')
        return self


class DesignSection(_Strict):
    """Model-matching design options."""
    norm: NormKind = Field(NormKind.HINF)
    basis_degree: int = Field(8, ge=0, le=20, description="Q basis degree d")
    basis_pole_s: float = Field(0.1, gt=0, description="Q basis time constant λ")
    grid_points: int = Field(200, ge=10, le=5000)
    grid_w_min_rad_s: float = Field(1e-3, gt=0)
    grid_w_max_rad_s: float = Field(1e3, gt=0)
    factor_pole_rad_s: float = Field(1.0, gt=0, description="Coprime factorization pole α")

    @field_validator('grid_w_max_rad_s')
    @classmethod
    def validate_grid(cls, v, info):
        """Upper grid frequency must exceed the lower one."""
        lo = info.data.get('grid_w_min_rad_s')
        if lo is not None and v <= lo:
            raise ValueError('grid_w_max_rad_s must be greater than grid_w_min_rad_s')
        return v


class DelaySection(_Strict):
    """Fixed, identical delays of every vehicle."""
    theta_s: float = Field(0.0, ge=0, description="Wireless broadcast delay θ")
    phi_s: float = Field(0.0, ge=0, description="Actuator delay φ")
    compensated: bool = Field(True, description="Apply the measurement-delay compensation")
    compensation_delay_s: Optional[float] = Field(None, ge=0, description="Measurement delay, defaults to θ")


class SignalSpec(_Strict):
    """A piecewise input signal."""
    kind: SignalKind
    amplitude: float
    start_s: float = Field(0.0, ge=0)
    end_s: Optional[float] = Field(None, gt=0)
    freq_rad_s: Optional[float] = Field(None, gt=0)
    ramp_s: float = Field(0.0, ge=0)

    @model_validator(mode='after')
    def validate_shape_fields(self):
        """Pulses need an end time, sines a frequency."""
        if self.kind in (SignalKind.PULSE, SignalKind.TRAPEZOID):
            if self.end_s is None or self.end_s <= self.start_s:
                raise ValueError('pulse signals need end_s > start_s')
        if self.kind == SignalKind.SINE and self.freq_rad_s is None:
            raise ValueError('sine signals need freq_rad_s')
        return self


class SimulationSection(_Strict):
    """Time-domain simulation settings and input signals."""
    dt_s: float = Field(1e-3, gt=0)
    duration_s: float = Field(60.0, gt=0)
    leader_control: List[SignalSpec] = Field(default_factory=list, description="u0 (m/s²)")
    disturbances: Dict[int, List[SignalSpec]] = Field(default_factory=dict, description="w_k per vehicle index")
    delay_model: Literal["exact", "pade"] = Field("exact")


class ScenarioFile(_Strict):
    """Complete scenario document (JSON)."""
    name: str = Field("scenario", min_length=1, max_length=200)
    platoon: PlatoonSection
    design: DesignSection = Field(default_factory=DesignSection)
    delays: DelaySection = Field(default_factory=DelaySection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)

    @model_validator(mode='after')
    def validate_disturbance_indices(self):
        """Disturbance keys must address the leader or a follower."""
        for k in self.simulation.disturbances:
            if k < 0 or k > self.platoon.n:
                raise ValueError(f'disturbance index {k} outside 0..{self.platoon.n}')
        return self


# ============================================================================
# Controller document
# ============================================================================

class RationalCoeffs(BaseModel):
    """Ascending numerator / denominator coefficients."""
    model_config = ConfigDict(extra="forbid")

    num: List[float]
    den: List[float]


class BasisMeta(BaseModel):
    """Q basis {1, 1/(λs+1), …, 1/(λs+1)^d}."""
    model_config = ConfigDict(extra="forbid")

    degree: int = Field(..., ge=0)
    pole_s: float = Field(..., gt=0)
    headway_extended: bool = False


class ControllerVehicle(BaseModel):
    """Per-vehicle realization of the distributed controller."""
    model_config = ConfigDict(extra="forbid")

    index: int = Field(..., ge=1)
    q_coefficients: List[float] = Field(default_factory=list)
    local: RationalCoeffs = Field(..., description="K_k")
    feedforward: Optional[RationalCoeffs] = Field(None, description="Φ_k⁻¹Φ_{k−1}, absent for k = 1")
    local_norm: Optional[float] = None


class ControllerDocument(BaseModel):
    """Serialized leader-information controller."""
    model_config = ConfigDict(extra="forbid")

    version: int = 1
    scenario: str
    n: int = Field(..., ge=1)
    h_s: float = Field(..., ge=0)
    norm: NormKind
    design_delay_s: float = Field(0.0, ge=0)
    measurement_delay_s: float = Field(0.0, ge=0)
    feedforward_delay_s: float = Field(0.0, ge=0)
    basis: BasisMeta
    vehicles: List[ControllerVehicle]

    @model_validator(mode='after')
    def validate_vehicles(self):
        """One entry per follower, in order."""
        if [v.index for v in self.vehicles] != list(range(1, self.n + 1)):
            raise ValueError('vehicles must be listed for indices 1..n in order')
        return self


# ============================================================================
# Reports
# ============================================================================

class DesignReport(BaseModel):
    """Outcome of a synth run."""
    scenario: str
    norm: NormKind
    local_norms: List[float] = Field(..., description="Certified per-vehicle costs")
    grid_norms: List[float] = Field(default_factory=list, description="Optimizer (grid) costs")
    saturated: List[bool] = Field(default_factory=list)
    certified: List[bool] = Field(default_factory=list, description="Certified H∞ norm within the grid optimum")
    total_cost: Optional[float] = None
    homogeneous_bound: Optional[float] = Field(None, description="√(2n−1)·per-channel H2 optimum")
    bezout_residual: float


class CheckResult(BaseModel):
    """One check of the verify battery."""
    name: str
    passed: bool
    residual: Optional[float] = None
    detail: str = ""


class VerifyReport(BaseModel):
    """Result of the verify battery."""
    scenario: str
    checks: List[CheckResult]

    @computed_field
    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


class BoundEntry(BaseModel):
    """Disturbance propagation norm from w_j (j = 0: leader) to (z_k, u_k)."""
    j: int
    k: int
    actual: float
    bound: float

    @property
    def slack(self) -> float:
        return self.bound - self.actual


class BoundReport(BaseModel):
    """String-stability bounds for all (j, k) pairs."""
    entries: List[BoundEntry]
    local_norms: List[float]
    all_satisfied: bool
    k_independent: Optional[bool] = Field(None, description="Only evaluated for homogeneous h = 0")


class MetricsReport(BaseModel):
    """Time-domain metrics of one simulation."""
    peaks: List[float] = Field(..., description="max|z_k|, k = 1..n")
    settling_times_s: List[float]
    amplification: List[float] = Field(..., description="max|z_{k+1}|/max|z_k|")
    nonzero_channels: List[int]


class SineGainResult(BaseModel):
    """Steady-state gain of a sinusoidal input vs the frequency response."""
    vehicle: int
    source: int
    freq_rad_s: float
    simulated_gain: float
    predicted_gain: float

    @computed_field
    @property
    def relative_error(self) -> float:
        return abs(self.simulated_gain - self.predicted_gain) / max(self.predicted_gain, 1e-12)


class SimulationSummary(BaseModel):
    """Metrics plus optional sinusoidal gain comparisons."""
    scenario: str
    samples: int
    metrics: MetricsReport
    sine_gains: List[SineGainResult] = Field(default_factory=list)


# ============================================================================
# HTTP API bodies
# ============================================================================

class SynthRequest(BaseModel):
    """Request body for /v1/design/synth."""
    scenario: ScenarioFile
    norm: Optional[NormKind] = None


class SynthResponse(BaseModel):
    """Response of /v1/design/synth."""
    controller: ControllerDocument
    report: DesignReport


class ControllerRequest(BaseModel):
    """Request body for verify / simulate."""
    scenario: ScenarioFile
    controller: ControllerDocument


class HealthResponse(BaseModel):
    """Health check response."""
    status: str = "ok"
    timestamp: datetime
    version: str = "0.1.0"
