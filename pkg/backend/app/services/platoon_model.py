"""
Platoon Model - 车队模型
Vehicle weightings Φ_k, the spacing-policy matrix T and its inverse, and the
full platoon TFM G = T·Φ·G_wp.

Vehicles are indexed 0 (leader) .. n (last follower); matrices are indexed by
followers only, so follower k sits at row/column k − 1.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from backend.app.core.errors import InvalidVehicle, RequiresPositiveHeadway
from backend.app.models.schemas import Headway, ScenarioFile, VehicleParams
from backend.app.services.tf_core import (
    RationalFn,
    StructureTag,
    TfMatrix,
    check_grid,
    hpow,
    is_stable,
    is_unimodular,
    pade_approx,
)

logger = logging.getLogger(__name__)

# Reference heterogeneous platoon: (mass_kg, actuator_tau_s, zero_sigma)
REFERENCE_LEADER = (1.0, 0.1, 1.0)
REFERENCE_FOLLOWERS = (
    (8.0, 0.1, 1.0),
    (4.0, 0.2, 2.0),
    (1.0, 0.05, 3.0),
    (3.0, 0.1, 4.0),
    (2.0, 0.1, 5.0),
    (7.0, 0.3, 6.0),
)


class MatrixKind(str, Enum):
    """Structured matrix shapes used throughout the design."""
    D = "D"                    # diagonal
    T_TOEPLITZ = "T_toeplitz"  # lower-triangular Toeplitz, (i, j) = e[i − j]
    R = "R"                    # lower-triangular, constant rows, (i, j) = e[i]


def build_phi(v: VehicleParams) -> RationalFn:
    """
    Φ_k(s) = (s + σ_k) / (m_k (τ_k s + 1)).

    Raises:
        InvalidVehicle: Φ_k not unimodular

    Examples:
        >>> v = VehicleParams(index=0, mass_kg=1.0, actuator_tau_s=1.0, zero_sigma=1.0)
        >>> build_phi(v).is_constant()
        True
    """
    phi = RationalFn(1.0 / (v.mass_kg * v.actuator_tau_s), [-v.zero_sigma], [-1.0 / v.actuator_tau_s])
    if not is_unimodular(phi):
        raise InvalidVehicle(f"vehicle {v.index}: Φ is not unimodular ({phi})")
    return phi


def build_vehicle_tf(v: VehicleParams, g_wp: RationalFn) -> RationalFn:
    """G_k = Φ_k · G_wp."""
    return build_phi(v) * g_wp


def headway_tf(headway: Headway, power: int = 1) -> RationalFn:
    """H(s)^power with H(s) = h·s + 1."""
    return hpow(headway.h_seconds, power)


def make_g_wp(num: Sequence[float] = (1.0,), den: Sequence[float] = (0.0, 0.0, 1.0),
              delay_s: float = 0.0, pade_order: int = 3) -> RationalFn:
    """Nominal plant from ascending coefficients, optionally with a Padé delay factor."""
    g = RationalFn.from_coeffs(num, den)
    if delay_s > 0:
        g = g * pade_approx(delay_s, pade_order)
    return g


@dataclass(frozen=True)
class PlatoonConfig:
    """
    Leader, n followers, spacing policy and the (possibly delay-absorbing) G_wp.

    absorbed_delay_s records the delay whose Padé approximant is part of
    base_plant_g_wp; the delay compensation checks against it.
    """
    leader: VehicleParams
    followers: Tuple[VehicleParams, ...]
    headway: Headway
    base_plant_g_wp: RationalFn
    delta_m: float = 0.0
    pade_order: int = 3
    absorbed_delay_s: float = 0.0
    nominal_plant: Optional[RationalFn] = None
    _phis: Tuple[RationalFn, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.followers:
            raise InvalidVehicle("a platoon needs at least one follower")
        if [v.index for v in self.followers] != list(range(1, len(self.followers) + 1)):
            raise InvalidVehicle("followers must be indexed 1..n in order")
        if not self.base_plant_g_wp.is_strictly_proper():
            raise InvalidVehicle("G_wp must be strictly proper")
        phis = tuple(build_phi(v) for v in (self.leader,) + tuple(self.followers))
        object.__setattr__(self, "_phis", phis)

    @property
    def n(self) -> int:
        return len(self.followers)

    @property
    def h(self) -> float:
        return self.headway.h_seconds

    def vehicle(self, k: int) -> VehicleParams:
        return self.leader if k == 0 else self.followers[k - 1]

    def phi(self, k: int) -> RationalFn:
        """Φ_k for k = 0 (leader) .. n."""
        return self._phis[k]

    def vehicle_tf(self, k: int) -> RationalFn:
        return self._phis[k] * self.base_plant_g_wp

    @property
    def undelayed_plant(self) -> RationalFn:
        """G_wp without the absorbed Padé factor."""
        return self.base_plant_g_wp if self.nominal_plant is None else self.nominal_plant

    def is_homogeneous(self) -> bool:
        """Every Φ_k (leader included) equal to 1."""
        return all(p.is_constant() and abs(p.gain - 1.0) < 1e-12 for p in self._phis)


def reference_config(h: float = 0.0, delay_s: float = 0.0, pade_order: int = 3,
                     n: Optional[int] = None) -> PlatoonConfig:
    """The six-follower heterogeneous reference platoon (first n followers if given)."""
    rows = REFERENCE_FOLLOWERS[: n or len(REFERENCE_FOLLOWERS)]
    m0, t0, s0 = REFERENCE_LEADER
    return PlatoonConfig(
        leader=VehicleParams(index=0, mass_kg=m0, actuator_tau_s=t0, zero_sigma=s0,
                             actuation_delay_s=delay_s),
        followers=tuple(VehicleParams(index=k + 1, mass_kg=m, actuator_tau_s=t, zero_sigma=sg,
                                      actuation_delay_s=delay_s)
                        for k, (m, t, sg) in enumerate(rows)),
        headway=Headway(h_seconds=h),
        base_plant_g_wp=make_g_wp(delay_s=delay_s, pade_order=pade_order),
        pade_order=pade_order,
        absorbed_delay_s=delay_s,
        nominal_plant=make_g_wp(),
    )


def homogeneous_config(n: int, h: float = 0.0) -> PlatoonConfig:
    """n identical double integrators (Φ_k = 1)."""
    unit = dict(mass_kg=1.0, actuator_tau_s=1.0, zero_sigma=1.0)
    return PlatoonConfig(
        leader=VehicleParams(index=0, **unit),
        followers=tuple(VehicleParams(index=k, **unit) for k in range(1, n + 1)),
        headway=Headway(h_seconds=h),
        base_plant_g_wp=make_g_wp(),
    )


def design_delay(scenario: ScenarioFile) -> float:
    """Delay absorbed into G_wp for design: φ, plus θ in compensated mode."""
    d = scenario.delays
    if not scenario.platoon.g_wp.absorb_delay:
        return 0.0
    if d.compensated:
        comp = d.theta_s if d.compensation_delay_s is None else d.compensation_delay_s
        return d.phi_s + comp
    return d.phi_s


def config_from_scenario(scenario: ScenarioFile) -> PlatoonConfig:
    """Build the PlatoonConfig described by a scenario file."""
    p = scenario.platoon
    d = scenario.delays
    delay = design_delay(scenario)

    def params(k, e):
        return VehicleParams(index=k, mass_kg=e.mass_kg, actuator_tau_s=e.actuator_tau_s,
                             zero_sigma=e.zero_sigma, actuation_delay_s=d.phi_s, comm_delay_s=d.theta_s)

    cfg = PlatoonConfig(
        leader=params(0, p.leader),
        followers=tuple(params(k, e) for k, e in enumerate(p.vehicles, start=1)),
        headway=Headway(h_seconds=p.h_s),
        base_plant_g_wp=make_g_wp(p.g_wp.num, p.g_wp.den, delay, p.pade_order),
        delta_m=p.delta_m,
        pade_order=p.pade_order,
        absorbed_delay_s=delay,
        nominal_plant=make_g_wp(p.g_wp.num, p.g_wp.den),
    )
    logger.info(f"Platoon '{scenario.name}': n={cfg.n}, h={cfg.h}, design delay={delay}s")
    return cfg


def with_plant_delay(cfg: PlatoonConfig, delay_s: float) -> PlatoonConfig:
    """The same platoon with G_wp·pade(delay_s) in place of the absorbed delay."""
    g = cfg.undelayed_plant
    base = g * pade_approx(delay_s, cfg.pade_order) if delay_s > 0 else g
    return replace(cfg, base_plant_g_wp=base, absorbed_delay_s=delay_s, nominal_plant=g)


# ============================================================================
# Structured matrices
# ============================================================================

def structured_matrix(kind: MatrixKind, elems: Sequence[RationalFn]) -> TfMatrix:
    """
    Build D{·}, T{·} (lower Toeplitz) or R{·} (constant rows) from n elements.

    Examples:
        >>> r = structured_matrix(MatrixKind.R, [RationalFn.const(1), RationalFn.const(2)])
        >>> r[1, 0].gain, r[1, 1].gain
        (2.0, 2.0)
    """
    kind = MatrixKind(kind)
    n = len(elems)
    z = RationalFn.zero()
    if kind == MatrixKind.D:
        return TfMatrix.diag(elems)
    if kind == MatrixKind.T_TOEPLITZ:
        rows = [[elems[i - j] if j <= i else z for j in range(n)] for i in range(n)]
    else:
        rows = [[elems[i] if j <= i else z for j in range(n)] for i in range(n)]
    return TfMatrix(rows, StructureTag.LOWER_TRIANGULAR)


def build_T(n: int, headway: Headway) -> TfMatrix:
    """Lower-bidiagonal spacing matrix: H on the diagonal, −1 below it."""
    H = headway_tf(headway)
    minus_one = RationalFn.const(-1.0)
    z = RationalFn.zero()
    rows = [[H if i == j else (minus_one if i == j + 1 else z) for j in range(n)] for i in range(n)]
    return TfMatrix(rows, StructureTag.LOWER_BIDIAGONAL if n > 1 else StructureTag.DIAGONAL)


def build_T_inv(n: int, headway: Headway) -> TfMatrix:
    """T⁻¹ = T{H⁻¹, H⁻², …, H⁻ⁿ}; all ones (R{1,…,1}) for h = 0."""
    return structured_matrix(MatrixKind.T_TOEPLITZ, [headway_tf(headway, -(k + 1)) for k in range(n)])


def check_HinvT_unimodular(n: int, headway: Headway) -> bool:
    """
    Check that H⁻¹T and its inverse T⁻¹H are proper and stable with all
    poles at −1/h, so H⁻¹T is unimodular.

    Raises:
        RequiresPositiveHeadway: h = 0 (T itself is constant then)
    """
    h = headway.h_seconds
    if h <= 0:
        raise RequiresPositiveHeadway("H⁻¹T is only of interest for h > 0")
    Hi = headway_tf(headway, -1)
    m = build_T(n, headway) * Hi
    m_inv = build_T_inv(n, headway) * headway_tf(headway)
    target = -1.0 / h
    for mat in (m, m_inv):
        for _, _, e in mat.entries():
            if not e.is_proper() or not is_stable(e):
                return False
            if e.poles.size and not np.allclose(e.poles, target, atol=1e-9 * max(1.0, abs(target))):
                return False
    # product is the identity on the check grid
    w = check_grid()
    prod = np.einsum("wij,wjk->wik", m.evaluate(w), m_inv.evaluate(w))
    return bool(np.max(np.abs(prod - np.eye(n))) < 1e-10)


def build_plant(cfg: PlatoonConfig) -> TfMatrix:
    """
    G = T·D{Φ_1, …, Φ_n}·G_wp: diagonal H·G_k, subdiagonal −G_k.

    Maps u = (u_1..u_n) to z = (z_1..z_n).
    """
    T = build_T(cfg.n, cfg.headway)
    G = TfMatrix.diag([cfg.vehicle_tf(k) for k in range(1, cfg.n + 1)])
    return T @ G


def leader_channel(cfg: PlatoonConfig) -> TfMatrix:
    """V_1·G_0: the leader's influence enters through the first spacing error only."""
    g0 = cfg.vehicle_tf(0)
    return TfMatrix.column([g0] + [RationalFn.zero()] * (cfg.n - 1))


def diag_phi(cfg: PlatoonConfig, power: int = 1) -> TfMatrix:
    """D{Φ_1^power, …, Φ_n^power}."""
    return TfMatrix.diag([cfg.phi(k) ** power for k in range(1, cfg.n + 1)])


def phi_values(cfg: PlatoonConfig, w: np.ndarray) -> List[np.ndarray]:
    """Φ_k(jω) for k = 0..n."""
    return [cfg.phi(k).freq(w) for k in range(cfg.n + 1)]
