"""
Delay - 通信时延
Communication-delayed feedforward, its loss of the leader-information
structure, and the synchronization-based compensation that restores it.

Analysis stays rational: every delay is replaced by its Padé approximant.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from backend.app.core.errors import MismatchedPlantDelay, NegativeDelay
from backend.app.models.schemas import DelaySection
from backend.app.services.platoon_model import PlatoonConfig, with_plant_delay
from backend.app.services.synthesis import (
    LeaderInfoController,
    direct_closed_loop,
    qi_subspace_check,
    recursion_tfm,
)
from backend.app.services.tf_core import (
    RationalFn,
    StructureTag,
    TfMatrix,
    assert_proper,
    check_grid,
    pade_approx,
)

logger = logging.getLogger(__name__)

# design delay and compensated delay must agree to this many seconds
_DELAY_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class DelayConfig:
    """
    Identical delays of every vehicle.

    theta_s is the wireless broadcast delay, phi_s the actuator delay. In
    compensated mode every range measurement is delayed by
    measurement_delay_s (θ unless set explicitly).
    """
    theta_s: float = 0.0
    phi_s: float = 0.0
    pade_order: int = 3
    compensated: bool = True
    compensation_delay_s: Optional[float] = None

    def __post_init__(self):
        for name in ("theta_s", "phi_s"):
            if getattr(self, name) < 0:
                raise NegativeDelay(f"{name} must be >= 0")
        if self.compensation_delay_s is not None and self.compensation_delay_s < 0:
            raise NegativeDelay("compensation_delay_s must be >= 0")

    @classmethod
    def from_section(cls, section: DelaySection, pade_order: int = 3) -> "DelayConfig":
        return cls(theta_s=section.theta_s, phi_s=section.phi_s, pade_order=pade_order,
                   compensated=section.compensated, compensation_delay_s=section.compensation_delay_s)

    @property
    def measurement_delay_s(self) -> float:
        return self.theta_s if self.compensation_delay_s is None else self.compensation_delay_s

    @property
    def plant_delay_s(self) -> float:
        """Delay absorbed into the design plant: φ, plus the measurement delay when compensated."""
        return self.phi_s + (self.measurement_delay_s if self.compensated else 0.0)

    def pade(self, delay_s: float) -> RationalFn:
        return pade_approx(delay_s, self.pade_order)


def delayed_controller_tfm(c: LeaderInfoController, d: DelayConfig,
                           series_filter: Optional[RationalFn] = None) -> TfMatrix:
    """
    Controller seen by the platoon when every broadcast u_{k−1} arrives θ late.

    Entry (i, j) is the undelayed entry (Π F_l)·L_j times pade((i − j)·θ);
    an optional stable filter in series with every local controller models a
    pre-compensation attempt.
    """
    n = c.n
    f = RationalFn.one() if series_filter is None else series_filter
    z = RationalFn.zero()
    rows = [[z] * n for _ in range(n)]
    for j in range(1, n + 1):
        acc = c.local_branch(j) * f
        rows[j - 1][j - 1] = acc
        for i in range(j + 1, n + 1):
            acc = acc * c.feedforward_branch(i)
            rows[i - 1][j - 1] = acc * d.pade((i - j) * d.theta_s)
    k = TfMatrix(rows, StructureTag.LOWER_TRIANGULAR)
    assert_proper(k, "delayed controller")
    return k


def compensated_controller(c: LeaderInfoController, d: DelayConfig) -> LeaderInfoController:
    """
    Place the measurement delay on every range measurement z_k and run the
    recursion on the synchronized time base.

    The controller then realizes pade(θ_m)·K from z to the applied inputs.
    A scalar delay commutes with the plant, so on a platoon whose input
    delay is φ this is the undelayed leader-information loop of the plant
    G_wp·pade(φ + θ_m), and c must have been designed on that plant.
    feedforward_delay_s records the broadcast latency θ that the
    synchronization absorbs; latency above θ_m is not absorbed.

    Raises:
        MismatchedPlantDelay: c was designed for a different plant delay
    """
    if d.theta_s == 0.0 and d.measurement_delay_s == 0.0:
        return c
    expected = d.phi_s + d.measurement_delay_s
    if abs(c.design_delay_s - expected) > _DELAY_MATCH_TOL:
        raise MismatchedPlantDelay(
            f"controller designed for a {c.design_delay_s}s plant delay, compensation needs {expected}s")
    logger.info(f"compensating θ={d.theta_s}s with {d.measurement_delay_s}s measurement delay")
    return replace(c, measurement_delay_s=d.measurement_delay_s, feedforward_delay_s=d.theta_s)


def unabsorbed_broadcast_delay(c: LeaderInfoController, d: DelayConfig) -> float:
    """Per-hop broadcast latency left over after the controller's synchronization."""
    return max(d.theta_s - c.measurement_delay_s, 0.0)


def platoon_controller_tfm(c: LeaderInfoController, d: DelayConfig) -> TfMatrix:
    """
    Controller TFM from z to the applied inputs under broadcast latency d.theta_s.

    The controller's own measurement delay θ_m multiplies every entry;
    broadcast latency beyond θ_m enters per hop as in delayed_controller_tfm.
    """
    residual = unabsorbed_broadcast_delay(c, d)
    k = delayed_controller_tfm(c, replace(d, theta_s=residual)) if residual > 0 else recursion_tfm(c)
    if c.measurement_delay_s > 0:
        k = k * d.pade(c.measurement_delay_s)
    return k


def physical_config(cfg: PlatoonConfig, c: LeaderInfoController) -> PlatoonConfig:
    """
    The platoon the controller actually drives: its design plant without the
    measurement delay the design absorbed.

    Raises:
        MismatchedPlantDelay: the measurement delay exceeds the absorbed delay
    """
    if c.measurement_delay_s == 0.0:
        return cfg
    remaining = cfg.absorbed_delay_s - c.measurement_delay_s
    if remaining < -_DELAY_MATCH_TOL:
        raise MismatchedPlantDelay(
            f"measurement delay {c.measurement_delay_s}s exceeds the absorbed {cfg.absorbed_delay_s}s")
    return with_plant_delay(cfg, max(remaining, 0.0))


def membership_in_S(k: TfMatrix, cfg: PlatoonConfig) -> bool:
    """K ∈ S ⇔ T·Φ·K diagonal on the check grid."""
    return qi_subspace_check(cfg, k)


def compensation_residual(c: LeaderInfoController, d: DelayConfig, cfg: PlatoonConfig,
                          w: Optional[np.ndarray] = None) -> float:
    """
    Leakage of the leader disturbance past the first vehicle.

    The loop is closed with platoon_controller_tfm(c, d) around
    physical_config(cfg, c), so the delays sit where the controller puts
    them and the plant carries only its own input delay.

    Returns:
        max |T_zkw0|, k ≥ 2, relative to max(1, max |T_zw0|)
    """
    w = check_grid() if w is None else w
    direct = direct_closed_loop(physical_config(cfg, c), platoon_controller_tfm(c, d).evaluate(w), w)
    scale = max(1.0, float(np.max(np.abs(direct.t_zw0))))
    return float(np.max(np.abs(direct.t_zw0[:, 1:, :]), initial=0.0)) / scale
