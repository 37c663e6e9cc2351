"""
Simulator - 车队时域仿真
Fixed-step simulation of the closed-loop platoon with the distributed
controller recursion, sample-exact delays and disturbance injection.

Every LTI block (vehicle [R_k; s·R_k] with R_k = Φ_k·G_wp, controller
[F_k, L_k]) is discretized on its own. The bilinear (Tustin) map is the
default: it maps products of transfer functions to products of their
discretizations, so the cancellations behind the structural zeros of the
continuous loop also hold sample by sample.

The delays come from two places. The platoon carries the actuator delay φ
of the scenario. The controller carries its own measurement delay θ_m,
which is placed on every z_k before the local controller sees it; a
compensated controller runs its recursion on the synchronized time base,
so u_{k−1} reaches vehicle k time-aligned and only broadcast latency above
θ_m is applied to it.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Sequence

import numpy as np
import scipy.signal

from backend.app.core.config import settings
from backend.app.core.errors import Divergence, NonIntegerDelay
from backend.app.models.schemas import MetricsReport, NormKind, SignalKind, SignalSpec
from backend.app.services.coprime import platoon_dcf
from backend.app.services.delay import DelayConfig, compensated_controller, unabsorbed_broadcast_delay
from backend.app.services.model_matching import QBasis, design_platoon
from backend.app.services.platoon_model import PlatoonConfig, reference_config
from backend.app.services.synthesis import LeaderInfoController, build_controller, controller_tfm
from backend.app.services.tf_core import RationalFn, StateSpace, TfMatrix, pade_approx, to_state_space

logger = logging.getLogger(__name__)

# peaks below this fraction of the largest one count as zero channels
NONZERO_REL = 1e-4
# settling band, fraction of the channel peak
SETTLING_BAND = 0.02
# divergence is checked every this many samples
_CHECK_EVERY = 1000

REFERENCE_PHI_S = 0.1
REFERENCE_THETA_S = 0.03


# ============================================================================
# Signals
# ============================================================================

def sample_signal(specs: Sequence[SignalSpec], t: np.ndarray) -> np.ndarray:
    """Sum of piecewise signals sampled on t."""
    out = np.zeros_like(t)
    dt = t[1] - t[0] if t.size > 1 else 1.0
    eps = 0.5 * dt
    for s in specs:
        on = t >= s.start_s - eps
        if s.end_s is not None:
            on &= t < s.end_s - eps
        if s.kind in (SignalKind.PULSE, SignalKind.STEP):
            out += np.where(on, s.amplitude, 0.0)
        elif s.kind == SignalKind.SINE:
            out += np.where(on, s.amplitude * np.sin(s.freq_rad_s * (t - s.start_s)), 0.0)
        else:
            ramp = max(s.ramp_s, dt)
            up = np.clip((t - s.start_s) / ramp, 0.0, 1.0)
            down = np.clip((s.end_s - t) / ramp, 0.0, 1.0)
            out += s.amplitude * np.minimum(up, down) * (t >= s.start_s - eps)
    return out


def reference_signals(duration_s: float = 60.0):
    """Leader control u0 (two opposite 3 s pulses) and the 0.5 pulse w4 on [30, 32) s."""
    u0 = [SignalSpec(kind=SignalKind.PULSE, amplitude=1.0, start_s=1.0, end_s=4.0),
          SignalSpec(kind=SignalKind.PULSE, amplitude=-1.0, start_s=20.0, end_s=23.0)]
    w = {4: [SignalSpec(kind=SignalKind.PULSE, amplitude=0.5, start_s=30.0, end_s=32.0)]}
    return u0, w


# ============================================================================
# Scenario and result
# ============================================================================

@dataclass
class SimScenario:
    """One simulation run; u0 and the disturbances are sampled on the run's grid."""
    cfg: PlatoonConfig
    controller: LeaderInfoController
    delays: DelayConfig
    dt_s: float
    duration_s: float
    u0: np.ndarray
    disturbances: Dict[int, np.ndarray] = field(default_factory=dict)
    delay_model: Literal["exact", "pade"] = "exact"
    method: str = field(default_factory=lambda: settings.SIM_METHOD)

    def __post_init__(self):
        if self.dt_s <= 0 or self.duration_s <= 0:
            raise ValueError("dt_s and duration_s must be positive")
        if self.u0.shape != (self.samples,):
            raise ValueError(f"u0 must have {self.samples} samples")
        for k, w in self.disturbances.items():
            if not 0 <= k <= self.cfg.n or w.shape != (self.samples,):
                raise ValueError(f"disturbance {k} has the wrong index or length")

    @property
    def samples(self) -> int:
        return int(round(self.duration_s / self.dt_s)) + 1

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.samples) * self.dt_s

    @classmethod
    def from_specs(cls, cfg: PlatoonConfig, controller: LeaderInfoController, delays: DelayConfig,
                   dt_s: float, duration_s: float, u0: Sequence[SignalSpec],
                   disturbances: Dict[int, Sequence[SignalSpec]], **kwargs) -> "SimScenario":
        t = np.arange(int(round(duration_s / dt_s)) + 1) * dt_s
        return cls(cfg=cfg, controller=controller, delays=delays, dt_s=dt_s, duration_s=duration_s,
                   u0=sample_signal(u0, t),
                   disturbances={k: sample_signal(v, t) for k, v in disturbances.items()}, **kwargs)


@dataclass
class SimResult:
    """
    Sampled trajectories.

    y, v, u: (n+1, T) for vehicles 0..n; z: (n, T) for followers 1..n.
    """
    t: np.ndarray
    y: np.ndarray
    v: np.ndarray
    z: np.ndarray
    u: np.ndarray
    w: np.ndarray
    h: float

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def spacing_residual(self) -> float:
        """max |z_k − (y_{k−1} − y_k − h·v_k)| over all samples."""
        expected = self.y[:-1] - self.y[1:] - self.h * self.v[1:]
        return float(np.max(np.abs(self.z - expected), initial=0.0))


# ============================================================================
# Discrete blocks
# ============================================================================

class _Block:
    """Discrete state-space block x⁺ = A·x + B·e, out = C·x + D·e."""

    def __init__(self, ss: StateSpace, dt: float, method: str):
        if ss.nstates:
            A, B, C, D, _ = scipy.signal.cont2discrete((ss.A, ss.B, ss.C, ss.D), dt, method=method)
        else:
            A, B, C, D = ss.A, ss.B, ss.C, ss.D
        self.A, self.B, self.C, self.D = A, B, C, D
        self.x = np.zeros(A.shape[0])

    def free(self) -> np.ndarray:
        """Output part that does not depend on the current input."""
        return self.C @ self.x

    def update(self, e: np.ndarray):
        self.x = self.A @ self.x + self.B @ e


def _samples(delay_s: float, dt: float, what: str) -> int:
    n = delay_s / dt
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise NonIntegerDelay(f"{what} of {delay_s}s is not a multiple of dt={dt}s")
    return int(round(n))


def _plant_block(phi: RationalFn, plant: RationalFn, dt: float, method: str) -> _Block:
    r = phi * plant
    return _Block(to_state_space(TfMatrix.column([r, RationalFn.s() * r])), dt, method)


def _controller_block(c: LeaderInfoController, k: int, dt: float, method: str,
                      broadcast: Optional[RationalFn], measurement: Optional[RationalFn] = None) -> _Block:
    local = c.local_branch(k) if measurement is None else c.local_branch(k) * measurement
    if k == 1:
        return _Block(to_state_space(TfMatrix([[local]])), dt, method)
    ff = c.feedforward_branch(k)
    if broadcast is not None:
        ff = ff * broadcast
    return _Block(to_state_space(TfMatrix([[ff, local]])), dt, method)


# ============================================================================
# Simulation
# ============================================================================

def simulate(sc: SimScenario) -> SimResult:
    """
    Run the closed loop z = V₁G₀(u₀+w₀) − G(u + w), u = K·z sample by sample.

    Vehicles are processed front to back; when neither the vehicle input nor
    the measurement is delayed the instantaneous loop through the plant and
    controller feedthroughs is solved in closed form.

    Raises:
        NonIntegerDelay: a delay is not an integer number of samples
        Divergence: any signal exceeds settings.DIVERGENCE_LIMIT
    """
    cfg, c, d, dt = sc.cfg, sc.controller, sc.delays, sc.dt_s
    n, h, T = cfg.n, cfg.h, sc.samples
    exact = sc.delay_model == "exact"

    plant = cfg.undelayed_plant
    meas_delay = c.measurement_delay_s
    cast_delay = unabsorbed_broadcast_delay(c, d)
    if exact:
        n_plant = _samples(d.phi_s, dt, "plant delay")
        n_meas = _samples(meas_delay, dt, "measurement delay")
        n_cast = _samples(cast_delay, dt, "broadcast delay")
        cast_tf = meas_tf = None
    else:
        plant = plant * pade_approx(d.phi_s, d.pade_order)
        n_plant = n_meas = n_cast = 0
        cast_tf = pade_approx(cast_delay, d.pade_order) if cast_delay > 0 else None
        meas_tf = pade_approx(meas_delay, d.pade_order) if meas_delay > 0 else None

    plants = [_plant_block(cfg.phi(k), plant, dt, sc.method) for k in range(n + 1)]
    ctrls = [None] + [_controller_block(c, k, dt, sc.method, cast_tf, meas_tf) for k in range(1, n + 1)]

    y = np.zeros((n + 1, T))
    v = np.zeros((n + 1, T))
    u = np.zeros((n + 1, T))
    z = np.zeros((n, T))
    w = np.zeros((n + 1, T))
    for k, wk in sc.disturbances.items():
        w[k] = wk
    u[0] = sc.u0
    drive = np.zeros((n + 1, T))     # u + w, before the plant delay
    limit = settings.DIVERGENCE_LIMIT

    for i in range(T):
        for k in range(n + 1):
            pb = plants[k]
            out0 = pb.free()
            dq = pb.D[0, 0] + h * pb.D[1, 0]
            q0 = out0[0] + h * out0[1]
            delayed = n_plant > 0
            p = drive[k, i - n_plant] if delayed and i >= n_plant else 0.0

            if k == 0:
                if not delayed:
                    p = u[0, i] + w[0, i]
            else:
                cb = ctrls[k]
                c_free = cb.free()[0]
                if k >= 2:
                    a = u[k - 1, i - n_cast] if i >= n_cast else 0.0
                    c0 = c_free + cb.D[0, 0] * a
                    dz = cb.D[0, 1]
                else:
                    a = None
                    c0 = c_free
                    dz = cb.D[0, 0]
                y_prev = y[k - 1, i]
                if n_meas > 0:
                    zc = z[k - 1, i - n_meas] if i >= n_meas else 0.0
                    uk = c0 + dz * zc
                    if not delayed:
                        p = uk + w[k, i]
                    zk = y_prev - (q0 + dq * p)
                elif delayed:
                    zk = zc = y_prev - (q0 + dq * p)
                    uk = c0 + dz * zk
                else:
                    uk = (c0 + dz * (y_prev - q0 - dq * w[k, i])) / (1.0 + dz * dq)
                    p = uk + w[k, i]
                    zk = zc = y_prev - (q0 + dq * p)
                u[k, i] = uk
                z[k - 1, i] = zk
                cb.update(np.array([zc]) if a is None else np.array([a, zc]))

            y[k, i] = out0[0] + pb.D[0, 0] * p
            v[k, i] = out0[1] + pb.D[1, 0] * p
            drive[k, i] = u[k, i] + w[k, i]
            pb.update(np.array([p]))

        if i % _CHECK_EVERY == 0 or i == T - 1:
            _check_finite(i * dt, y[:, i], v[:, i], u[:, i], limit=limit)

    logger.info(f"simulated {T} samples (dt={dt}s, {sc.delay_model} delays, {sc.method})")
    return SimResult(t=sc.t, y=y, v=v, z=z, u=u, w=w, h=h)


def _check_finite(t: float, *signals: np.ndarray, limit: float):
    for s in signals:
        if not np.all(np.isfinite(s)) or np.max(np.abs(s)) > limit:
            raise Divergence(f"signal exceeded {limit:g} at t={t:.3f}s")


def simulate_controller_response(c: LeaderInfoController, z: np.ndarray, dt: float,
                                 realization: Literal["recursion", "factorized"] = "recursion",
                                 method: Optional[str] = None) -> np.ndarray:
    """
    Open-loop controller output u (n, T) for given spacing errors z (n, T).

    "recursion" runs the per-vehicle chain u_k = F_k·u_{k−1} + L_k·z_k;
    "factorized" realizes K_Q = Y_Q⁻¹X_Q as one multivariable block.
    """
    method = settings.SIM_METHOD if method is None else method
    n, T = z.shape
    u = np.zeros((n, T))
    if realization == "factorized":
        blk = _Block(to_state_space(controller_tfm(c)), dt, method)
        for i in range(T):
            u[:, i] = blk.free() + blk.D @ z[:, i]
            blk.update(z[:, i])
        return u
    blocks = [_controller_block(c, k, dt, method, None) for k in range(1, n + 1)]
    for i in range(T):
        for k in range(1, n + 1):
            b = blocks[k - 1]
            e = np.array([z[0, i]]) if k == 1 else np.array([u[k - 2, i], z[k - 1, i]])
            u[k - 1, i] = b.free()[0] + b.D[0] @ e
            b.update(e)
    return u


# ============================================================================
# Metrics
# ============================================================================

def metrics(r: SimResult) -> MetricsReport:
    """Per-channel peaks, settling times, downstream amplification and nonzero channels."""
    peaks = np.max(np.abs(r.z), axis=1) if r.z.size else np.zeros(0)
    top = float(np.max(peaks, initial=0.0))
    settling = []
    for k in range(r.n):
        if peaks[k] == 0.0:
            settling.append(0.0)
            continue
        outside = np.flatnonzero(np.abs(r.z[k]) > SETTLING_BAND * peaks[k])
        settling.append(float(r.t[outside[-1]]) if outside.size else 0.0)
    amp = [float(peaks[k + 1] / peaks[k]) if peaks[k] > 0 else 0.0 for k in range(r.n - 1)]
    nonzero = [k + 1 for k in range(r.n) if top > 0 and peaks[k] > NONZERO_REL * top]
    return MetricsReport(peaks=[float(p) for p in peaks], settling_times_s=settling,
                         amplification=amp, nonzero_channels=nonzero)


def sinusoid_amplitude(x: np.ndarray, t: np.ndarray, freq_rad_s: float, t_from: float) -> float:
    """Amplitude of the ω component of x on t ≥ t_from (least-squares fit with offset)."""
    sel = t >= t_from
    basis = np.stack([np.sin(freq_rad_s * t[sel]), np.cos(freq_rad_s * t[sel]), np.ones(sel.sum())], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x[sel], rcond=None)
    return float(np.hypot(coef[0], coef[1]))


# ============================================================================
# Reference run
# ============================================================================

def reference_controller(h: float = 0.5, norm: NormKind = NormKind.HINF,
                         basis: Optional[QBasis] = None):
    """Design the compensated reference controller; returns (cfg, controller, delays)."""
    delays = DelayConfig(theta_s=REFERENCE_THETA_S, phi_s=REFERENCE_PHI_S)
    cfg = reference_config(h=h, delay_s=delays.plant_delay_s)
    dcf = platoon_dcf(cfg)
    design = design_platoon(cfg, dcf, norm, basis)
    controller = compensated_controller(build_controller(dcf, design.q), delays)
    return cfg, controller, delays


def run_reference_example(h: float = 0.5, dt_s: Optional[float] = None, duration_s: float = 60.0,
                          basis: Optional[QBasis] = None) -> SimResult:
    """
    Six heterogeneous vehicles, φ = 0.1 s, θ = 0.03 s: H∞ local designs on the
    Padé-absorbed plant, delay compensation, then the reference inputs.
    """
    dt_s = settings.SIM_DT if dt_s is None else dt_s
    cfg, controller, delays = reference_controller(h, NormKind.HINF, basis)
    u0, w = reference_signals(duration_s)
    sc = SimScenario.from_specs(cfg, controller, delays, dt_s, duration_s, u0, w)
    return simulate(sc)
