"""
Synthesis - 领队信息控制器
Leader-information controllers from a diagonal Youla parameter, their
distributed per-vehicle realization, the closed-loop maps and the structural
checks (diagonality, subspace membership, string-stability bounds).

Loop convention: z = V₁G₀w₀ − G(u + w), u = K·z, so that
T_zw0 = (I + GK)⁻¹V₁G₀, T_zw = −(I + GK)⁻¹G, T_uw0 = K·T_zw0, T_uw = K·T_zw.
"""
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from backend.app.core.config import settings
from backend.app.core.errors import SingularYFactor, StructureViolation, UnstableParameter
from backend.app.models.schemas import BoundEntry, BoundReport, Headway
from backend.app.services.coprime import PlatoonDcf, shift_dcf
from backend.app.services.platoon_model import (
    PlatoonConfig,
    build_T,
    build_T_inv,
    build_plant,
    diag_phi,
    leader_channel,
)
from backend.app.services.tf_core import (
    RationalFn,
    StructureTag,
    TfMatrix,
    assert_proper,
    check_grid,
    grid_residual,
    hinf_norm,
    hpow,
    is_stable,
    offdiag_max,
)

logger = logging.getLogger(__name__)


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True)
class DiagonalYoula:
    """Q = D{Q₁₁, …, Qₙₙ} with every entry stable and proper."""
    q: Tuple[RationalFn, ...]

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(self.q))
        for k, e in enumerate(self.q, start=1):
            if not e.is_proper() or not is_stable(e):
                raise UnstableParameter(f"Q[{k},{k}] must be stable and proper")

    @classmethod
    def zeros(cls, n: int) -> "DiagonalYoula":
        return cls(tuple(RationalFn.zero() for _ in range(n)))

    @classmethod
    def uniform(cls, q: RationalFn, n: int) -> "DiagonalYoula":
        return cls(tuple(q for _ in range(n)))

    @property
    def n(self) -> int:
        return len(self.q)

    def entry(self, k: int) -> RationalFn:
        """Q_kk for follower k = 1..n."""
        return self.q[k - 1]

    def as_matrix(self) -> TfMatrix:
        return TfMatrix.diag(self.q)


@dataclass(frozen=True)
class LeaderInfoController:
    """
    K_Q = Y_Q⁻¹X_Q together with its distributed realization

        u_k = H⁻¹·Φ_k⁻¹Φ_{k−1}·u_{k−1} + H⁻¹·K_k·z_k.

    local_k[k−1] is K_k and feedforward[k−2] is Φ_k⁻¹Φ_{k−1} (k ≥ 2).
    Compensated controllers also record the delays placed on the measurement
    and feedforward branches.
    """
    yq: Optional[TfMatrix]
    xq: Optional[TfMatrix]
    local_k: Tuple[RationalFn, ...]
    feedforward: Tuple[RationalFn, ...]
    headway: Headway
    q: Optional[DiagonalYoula] = None
    design_delay_s: float = 0.0
    measurement_delay_s: float = 0.0
    feedforward_delay_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "local_k", tuple(self.local_k))
        object.__setattr__(self, "feedforward", tuple(self.feedforward))
        if len(self.feedforward) != len(self.local_k) - 1:
            raise StructureViolation("need n local controllers and n−1 feedforward gains")
        if self.yq is not None and self.yq.structure_tag not in (StructureTag.LOWER_BIDIAGONAL,
                                                                 StructureTag.DIAGONAL):
            raise StructureViolation("Y_Q must be lower bidiagonal")
        if self.xq is not None and self.xq.structure_tag != StructureTag.DIAGONAL:
            raise StructureViolation("X_Q must be diagonal")

    @property
    def n(self) -> int:
        return len(self.local_k)

    def local_branch(self, k: int) -> RationalFn:
        """H⁻¹K_k, the proper transfer from z_k to u_k."""
        return hpow(self.headway.h_seconds, -1) * self.local_k[k - 1]

    def feedforward_branch(self, k: int) -> RationalFn:
        """H⁻¹Φ_k⁻¹Φ_{k−1}, the transfer from u_{k−1} to u_k (k ≥ 2)."""
        return hpow(self.headway.h_seconds, -1) * self.feedforward[k - 2]


@dataclass(frozen=True)
class ClosedLoopMaps:
    """The four closed-loop maps; lemma_residual is set when Q is diagonal."""
    t_zw0: TfMatrix
    t_uw0: TfMatrix
    t_zw: TfMatrix
    t_uw: TfMatrix
    lemma_residual: Optional[float] = None

    @property
    def n(self) -> int:
        return self.t_zw.shape[0]


class DirectResponse(NamedTuple):
    """Closed-loop frequency responses from (I + GK)⁻¹ on a grid; shapes (W, n, ·)."""
    w: np.ndarray
    t_zw0: np.ndarray
    t_uw0: np.ndarray
    t_zw: np.ndarray
    t_uw: np.ndarray


# ============================================================================
# Controller parameterization
# ============================================================================

def build_controller(dcf: PlatoonDcf, q: DiagonalYoula) -> LeaderInfoController:
    """
    Left factors Y_Q = Y − Q·Ñ and X_Q = X + Q·M̃ and the local controllers

        K_k = Φ_k⁻¹ (Y℘ − Q_kk·H·Ñ℘)⁻¹ (X℘ + Q_kk·H·M̃℘).

    Args:
        dcf: structured platoon factorization
        q: diagonal Youla parameter with n entries

    Returns:
        LeaderInfoController

    Raises:
        UnstableParameter: size mismatch
        SingularYFactor: Y℘ − Q_kk·H·Ñ℘ ≡ 0
    """
    cfg = dcf.cfg
    n = cfg.n
    if q.n != n:
        raise UnstableParameter(f"Youla parameter has {q.n} entries, platoon has {n} followers")
    sc = dcf.scalar
    H = hpow(cfg.h, 1)
    Hi = hpow(cfg.h, -1)
    z = RationalFn.zero()

    y_rows = [[z] * n for _ in range(n)]
    x_diag = []
    local_k = []
    for k in range(1, n + 1):
        qk = q.entry(k)
        y_fac = sc.Y - qk * H * sc.N
        if y_fac.is_zero():
            raise SingularYFactor(f"Y − Q·H·Ñ vanishes for vehicle {k}")
        x_fac = sc.X + qk * H * sc.M
        y_rows[k - 1][k - 1] = y_fac * cfg.phi(k)
        if k >= 2:
            y_rows[k - 1][k - 2] = (-Hi * sc.Y + qk * sc.N) * cfg.phi(k - 1)
        x_diag.append(Hi * x_fac)
        local_k.append(cfg.phi(k).inv() * x_fac / y_fac)

    yq = TfMatrix(y_rows, StructureTag.LOWER_BIDIAGONAL if n > 1 else StructureTag.DIAGONAL)
    xq = TfMatrix.diag(x_diag)
    feedforward = [cfg.phi(k).inv() * cfg.phi(k - 1) for k in range(2, n + 1)]
    c = LeaderInfoController(yq=yq, xq=xq, local_k=tuple(local_k), feedforward=tuple(feedforward),
                             headway=cfg.headway, q=q, design_delay_s=cfg.absorbed_delay_s)
    logger.debug(f"build_controller: n={n}, K_k degrees {[len(k.poles) for k in local_k]}")
    return c


def controller_tfm(c: LeaderInfoController) -> TfMatrix:
    """
    K_Q = Y_Q⁻¹·X_Q by forward substitution (lower triangular).

    Controllers loaded from a document carry no factors; their recursion TFM
    is returned instead.
    """
    if c.yq is None or c.xq is None:
        return recursion_tfm(c)
    k = c.yq.solve_lower(c.xq)
    assert_proper(k, "K_Q")
    return k


def recursion_tfm(c: LeaderInfoController, delay: Optional[RationalFn] = None,
                  series_filter: Optional[RationalFn] = None) -> TfMatrix:
    """
    TFM of the distributed recursion u_k = F_k·u_{k−1} + L_k·z_k.

    Entry (i, j) = (Π_{l=j+1..i} F_l)·L_j with F_l = H⁻¹Φ_l⁻¹Φ_{l−1}·delay
    and L_j = H⁻¹K_j·series_filter.
    """
    n = c.n
    delay = RationalFn.one() if delay is None else delay
    series_filter = RationalFn.one() if series_filter is None else series_filter
    z = RationalFn.zero()
    rows = [[z] * n for _ in range(n)]
    for j in range(1, n + 1):
        acc = c.local_branch(j) * series_filter
        rows[j - 1][j - 1] = acc
        for i in range(j + 1, n + 1):
            acc = acc * c.feedforward_branch(i) * delay
            rows[i - 1][j - 1] = acc
    k = TfMatrix(rows, StructureTag.LOWER_TRIANGULAR)
    assert_proper(k, "distributed controller")
    return k


def predecessor_follower_tfm(c: LeaderInfoController) -> TfMatrix:
    """D{H⁻¹K_1, …, H⁻¹K_n}: same local loops, no broadcast of u_{k−1}."""
    return TfMatrix.diag([c.local_branch(k) for k in range(1, c.n + 1)])


# ============================================================================
# Closed loop
# ============================================================================

def lemma_maps(cfg: PlatoonConfig, dcf: PlatoonDcf, q: DiagonalYoula) -> ClosedLoopMaps:
    """
    Entrywise closed forms of the closed-loop maps for diagonal Q.

    With a_k = X̃℘ + H·M℘·Q_kk and b_k = Ỹ℘ − H·N℘·Q_kk:
    T_z1w0 = b_1·Ñ·Φ_0, T_ukw0 = a_1·Ñ·Φ_0·Φ_k⁻¹·H⁻ᵏ, T_zjwj = −b_j·Ñ·H·Φ_j,
    T_z(j+1)wj = b_{j+1}·Ñ·Φ_j, T_ujwj = −a_j·Ñ and, for k > j,
    T_ukwj = −M℘(Q_jj − Q_(j+1)(j+1))·Ñ·Φ_j·Φ_k⁻¹·H^(j+1−k).
    """
    n = cfg.n
    sc = dcf.scalar
    h = cfg.h
    H = hpow(h, 1)
    z = RationalFn.zero()
    a = [None] + [sc.X + H * sc.M * q.entry(k) for k in range(1, n + 1)]
    b = [None] + [sc.Y - H * sc.N * q.entry(k) for k in range(1, n + 1)]
    phi = [cfg.phi(k) for k in range(n + 1)]

    zw0 = [b[1] * sc.N * phi[0]] + [z] * (n - 1)
    uw0 = [a[1] * sc.N * phi[0] * phi[k].inv() * hpow(h, -k) for k in range(1, n + 1)]
    zw = [[z] * n for _ in range(n)]
    uw = [[z] * n for _ in range(n)]
    for j in range(1, n + 1):
        zw[j - 1][j - 1] = -b[j] * sc.N * H * phi[j]
        uw[j - 1][j - 1] = -a[j] * sc.N
        if j < n:
            zw[j][j - 1] = b[j + 1] * sc.N * phi[j]
            dq = q.entry(j) - q.entry(j + 1)
            for k in range(j + 1, n + 1):
                uw[k - 1][j - 1] = -sc.M * dq * sc.N * phi[j] * phi[k].inv() * hpow(h, j + 1 - k)
    return ClosedLoopMaps(
        t_zw0=TfMatrix.column(zw0),
        t_uw0=TfMatrix.column(uw0),
        t_zw=TfMatrix(zw),
        t_uw=TfMatrix(uw),
    )


def _block_values(dcf: PlatoonDcf, q: TfMatrix, v1g0: TfMatrix, w: np.ndarray) -> DirectResponse:
    """Block products Ỹ_Q·M̃·V₁G₀, X̃_Q·M̃·V₁G₀, −Ỹ_Q·Ñ, −X̃_Q·Ñ as grid values."""
    ev = {name: getattr(dcf, name).evaluate(w) for name in ("M", "N", "Mt", "Nt", "Xt", "Yt")}
    qv = q.evaluate(w)
    yq = ev["Yt"] - ev["N"] @ qv
    xq = ev["Xt"] + ev["M"] @ qv
    lead = ev["Mt"] @ v1g0.evaluate(w)
    return DirectResponse(w=w, t_zw0=yq @ lead, t_uw0=xq @ lead, t_zw=-yq @ ev["Nt"], t_uw=-xq @ ev["Nt"])


def closed_loop(cfg: PlatoonConfig, dcf: PlatoonDcf,
                q: Union[DiagonalYoula, TfMatrix]) -> ClosedLoopMaps:
    """
    Closed-loop maps from the shifted factorization:
    T_zw0 = Ỹ_Q·M̃·V₁G₀, T_uw0 = X̃_Q·M̃·V₁G₀, T_zw = −Ỹ_Q·Ñ, T_uw = −X̃_Q·Ñ.

    For diagonal Q the entrywise closed forms are returned after a check
    against the block products evaluated pointwise on the check grid; the
    largest relative discrepancy is kept in lemma_residual.

    Raises:
        UnstableParameter: Q unstable or improper
        StructureViolation: closed forms and block products disagree above GRID_TOL
    """
    v1g0 = leader_channel(cfg)
    if not isinstance(q, DiagonalYoula):
        shifted = shift_dcf(dcf, q)
        block = ClosedLoopMaps(
            t_zw0=shifted.Yt @ shifted.Mt @ v1g0,
            t_uw0=shifted.Xt @ shifted.Mt @ v1g0,
            t_zw=-(shifted.Yt @ shifted.Nt),
            t_uw=-(shifted.Xt @ shifted.Nt),
        )
        for name in ("t_zw0", "t_uw0", "t_zw", "t_uw"):
            assert_proper(getattr(block, name), name)
        return block

    closed = lemma_maps(cfg, dcf, q)
    for name in ("t_zw0", "t_uw0", "t_zw", "t_uw"):
        assert_proper(getattr(closed, name), name)
    w = check_grid()
    block = _block_values(dcf, q.as_matrix(), v1g0, w)
    residual = max(
        grid_residual(getattr(closed, name).evaluate(w), getattr(block, name))
        for name in ("t_zw0", "t_uw0", "t_zw", "t_uw")
    )
    if residual > settings.GRID_TOL:
        raise StructureViolation(f"closed-form vs block closed-loop residual {residual:.3g}")
    return ClosedLoopMaps(closed.t_zw0, closed.t_uw0, closed.t_zw, closed.t_uw, lemma_residual=residual)


def direct_closed_loop(cfg: PlatoonConfig, k_values: np.ndarray,
                       w: Optional[np.ndarray] = None,
                       plant: Optional[TfMatrix] = None) -> DirectResponse:
    """
    Closed loop from (I + G·K)⁻¹ evaluated pointwise.

    Args:
        cfg: platoon
        k_values: K(jω), shape (W, n, n)
        w: grid matching k_values (check grid by default)
        plant: plant TFM if it differs from build_plant(cfg)
    """
    w = check_grid() if w is None else w
    G = (build_plant(cfg) if plant is None else plant).evaluate(w)
    v1g0 = leader_channel(cfg).evaluate(w)
    n = cfg.n
    S = np.linalg.inv(np.eye(n) + G @ k_values)
    t_zw0 = S @ v1g0
    t_zw = -S @ G
    return DirectResponse(w=w, t_zw0=t_zw0, t_uw0=k_values @ t_zw0, t_zw=t_zw, t_uw=k_values @ t_zw)


def is_leader_information(direct: DirectResponse, tol: float = 1e-7) -> bool:
    """T_zw0 has a nonzero entry only in the first row."""
    return bool(np.max(np.abs(direct.t_zw0[:, 1:, :]), initial=0.0) < tol)


# ============================================================================
# Structure checks
# ============================================================================

def _tphi_values(cfg: PlatoonConfig, w: np.ndarray) -> np.ndarray:
    return (build_T(cfg.n, cfg.headway) @ diag_phi(cfg)).evaluate(w)


def qi_subspace_check(cfg: PlatoonConfig, k: Union[TfMatrix, np.ndarray],
                      w: Optional[np.ndarray] = None, tol: Optional[float] = None) -> bool:
    """
    True iff T·Φ·K is diagonal on the grid, i.e. K ∈ S = Φ⁻¹T⁻¹·{diagonal}.

    Examples:
        >>> from backend.app.services.platoon_model import homogeneous_config
        >>> qi_subspace_check(homogeneous_config(2), TfMatrix.identity(2))
        False
    """
    w = check_grid() if w is None else w
    tol = settings.GRID_TOL if tol is None else tol
    k_values = k.evaluate(w) if isinstance(k, TfMatrix) else k
    p = _tphi_values(cfg, w) @ k_values
    scale = max(1.0, float(np.max(np.abs(p))))
    return offdiag_max(p) / scale <= tol


def subspace_member(cfg: PlatoonConfig, elems: Sequence[RationalFn]) -> TfMatrix:
    """Φ⁻¹T⁻¹·D{elems}, the generic member of S."""
    return diag_phi(cfg, -1) @ build_T_inv(cfg.n, cfg.headway) @ TfMatrix.diag(elems)


def kgk_in_subspace(cfg: PlatoonConfig, k: Union[TfMatrix, np.ndarray],
                    w: Optional[np.ndarray] = None) -> bool:
    """Quadratic invariance for one member: K·G·K ∈ S."""
    w = check_grid() if w is None else w
    kv = k.evaluate(w) if isinstance(k, TfMatrix) else k
    g = build_plant(cfg).evaluate(w)
    return qi_subspace_check(cfg, kv @ g @ kv, w)


# ============================================================================
# String stability
# ============================================================================

def _pair_norm(zk: RationalFn, uk: RationalFn) -> float:
    return hinf_norm(TfMatrix.column([zk, uk]))


def string_stability_bounds(cfg: PlatoonConfig, maps: ClosedLoopMaps) -> BoundReport:
    """
    Propagation norms ‖[T_zkwj; T_ukwj]‖∞ against their local-loop bounds.

    Leader (j = 0): ‖Φ_k⁻¹Φ_0H⁻ᵏ‖∞·ℓ_1.
    Followers (k > j): ‖Φ_jΦ_k⁻¹H^(j−k)‖∞·(ℓ_j + ℓ_(j+1)),
    where ℓ_j = ‖[T_zjwj; T_ujwj]‖∞ is the local loop of vehicle j.
    """
    n = cfg.n
    h = cfg.h
    phi = [cfg.phi(k) for k in range(n + 1)]
    loc = [0.0] + [_pair_norm(maps.t_zw[j - 1, j - 1], maps.t_uw[j - 1, j - 1]) for j in range(1, n + 1)]
    entries: List[BoundEntry] = []

    for k in range(1, n + 1):
        actual = _pair_norm(maps.t_zw0[k - 1, 0], maps.t_uw0[k - 1, 0])
        factor = hinf_norm(phi[k].inv() * phi[0] * hpow(h, -k))
        entries.append(BoundEntry(j=0, k=k, actual=actual, bound=factor * loc[1]))

    for j in range(1, n):
        for k in range(j + 1, n + 1):
            actual = _pair_norm(maps.t_zw[k - 1, j - 1], maps.t_uw[k - 1, j - 1])
            # H^(j−k), one power of H⁻¹ below the H^(j+1−k) form; both bound the pair norm
            factor = hinf_norm(phi[j] * phi[k].inv() * hpow(h, j - k))
            entries.append(BoundEntry(j=j, k=k, actual=actual, bound=factor * (loc[j] + loc[j + 1])))

    all_ok = all(e.actual <= e.bound + 1e-6 for e in entries)
    k_independent = None
    if h == 0.0 and cfg.is_homogeneous():
        k_independent = True
        for j in range(1, n):
            bounds = [e.bound for e in entries if e.j == j and e.k >= j + 2]
            if bounds and max(bounds) - min(bounds) > 1e-10:
                k_independent = False
    if not all_ok:
        worst = min(entries, key=lambda e: e.slack)
        logger.warning(f"string stability bound violated at (j={worst.j}, k={worst.k}), slack {worst.slack:.3g}")
    return BoundReport(entries=entries, local_norms=loc[1:], all_satisfied=all_ok, k_independent=k_independent)
