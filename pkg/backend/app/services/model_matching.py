"""
Model Matching - 模型匹配设计
Finite-basis H∞ / H2 model matching for the Youla parameter entries.

Every design problem here is affine in one parameter Q: T(Q) = T₁ + T₂·Q with
Q = Σ c_i·e_i over a fixed stable basis. On a log frequency grid the H∞
problem is a second-order cone program (cvxpy) and the H2 problem is a
weighted least-squares fit; both are certified afterwards with the exact
norm routines of tf_core.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
from numpy.polynomial import polynomial as npoly

from backend.app.core.config import settings
from backend.app.core.errors import (
    BasisTooSmall,
    DesignFailure,
    InfiniteCost,
    RequiresHomogeneous,
    RequiresZeroHeadway,
)
from backend.app.models.schemas import NormKind
from backend.app.services.coprime import PlatoonDcf
from backend.app.services.platoon_model import PlatoonConfig
from backend.app.services.synthesis import DiagonalYoula, lemma_maps
from backend.app.services.tf_core import (
    Polynomial,
    RationalFn,
    TfMatrix,
    freq_grid,
    h2_norm,
    hinf_norm,
    hpow,
)

logger = logging.getLogger(__name__)

# relative slack on the optimal cost when picking the minimum-norm coefficients
_TIE_EPS = 1e-6
# certified H∞ norm may exceed the grid optimum by this much before the grid is blamed
_CERT_EPS = 1e-3
# assembled ‖T_zw‖₂ against √(2n−1)·(channel optimum)
_BOUND_EPS = 1e-6


# ============================================================================
# Basis
# ============================================================================

@dataclass(frozen=True)
class QBasis:
    """
    Stable basis {1, 1/(λs+1), …, 1/(λs+1)^d}.

    With headway_s > 0 every element is repeated once more multiplied by
    H⁻¹ = 1/(hs+1), which makes the diagonal-only local problems as rich as
    the two-parameter ones.
    """
    degree: int = field(default_factory=lambda: settings.BASIS_DEGREE)
    pole_s: float = field(default_factory=lambda: settings.BASIS_POLE)
    headway_s: float = 0.0

    @property
    def extended(self) -> bool:
        return self.headway_s > 0.0

    @property
    def size(self) -> int:
        return (self.degree + 1) * (2 if self.extended else 1)

    def with_headway(self, h: float) -> "QBasis":
        return QBasis(self.degree, self.pole_s, h)

    def plain(self) -> "QBasis":
        return QBasis(self.degree, self.pole_s, 0.0)

    def elements(self) -> List[RationalFn]:
        lam = self.pole_s
        base = [RationalFn(lam ** -i, [], [-1.0 / lam] * i) for i in range(self.degree + 1)]
        if not self.extended:
            return base
        hi = hpow(self.headway_s, -1)
        return base + [e * hi for e in base]

    def freq(self, w: np.ndarray) -> np.ndarray:
        """Element responses, shape (size, len(w))."""
        return np.array([e.freq(w) for e in self.elements()])

    def combine(self, coefs: Sequence[float]) -> RationalFn:
        """Σ c_i·e_i as one rational function with exact basis poles."""
        coefs = np.asarray(coefs, dtype=float)
        if coefs.size != self.size:
            raise ValueError(f"expected {self.size} coefficients, got {coefs.size}")
        d, lam = self.degree, self.pole_s
        lin = np.array([1.0, lam])

        def part(c):
            acc = np.zeros(1)
            for i, ci in enumerate(c):
                acc = npoly.polyadd(acc, ci * npoly.polypow(lin, d - i))
            return acc

        num = part(coefs[: d + 1])
        poles = [-1.0 / lam] * d
        den_lead = lam ** d
        if self.extended:
            h = self.headway_s
            num = npoly.polyadd(npoly.polymul(num, [1.0, h]), part(coefs[d + 1:]))
            poles = poles + [-1.0 / h]
            den_lead *= h
        p = Polynomial(num)
        if p.is_zero() or np.max(np.abs(p.coeffs)) == 0.0:
            return RationalFn.zero()
        return RationalFn(p.leading() / den_lead, p.roots(), poles)


# ============================================================================
# Affine problems and grid solvers
# ============================================================================

class AffineProblem(NamedTuple):
    """T(Q) = t1 + Σ_b t2[b]·Q_b, all columns of equal length."""
    t1: Tuple[RationalFn, ...]
    t2: Tuple[Tuple[RationalFn, ...], ...]  # one column per free parameter


@dataclass
class LocalDesign:
    """Result of one finite-basis design."""
    index: int
    q: RationalFn
    coefficients: np.ndarray
    grid_cost: float
    cost: float
    saturated: bool = False
    extra: Tuple[RationalFn, ...] = ()
    certified: bool = True


def _grid_matrices(problem: AffineProblem, basis: QBasis, w: np.ndarray):
    """A0 (W, p) and A (m_total, W, p) for the stacked coefficient vector."""
    a0 = np.stack([f.freq(w) for f in problem.t1], axis=1)
    bvals = basis.freq(w)
    cols = []
    for t2 in problem.t2:
        t2v = np.stack([f.freq(w) for f in t2], axis=1)
        for e in bvals:
            cols.append(t2v * e[:, None])
    return a0, np.array(cols)


def _installed_solvers() -> List[str]:
    available = set(cp.installed_solvers())
    return [s for s in ("CLARABEL", "ECOS", "SCS") if s in available] or [None]


def _solve_problem(prob: cp.Problem) -> bool:
    for solver in _installed_solvers():
        try:
            prob.solve(solver=solver)
        except cp.SolverError as e:
            logger.debug(f"solver {solver} failed: {e}")
            continue
        if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return True
    return False


def solve_hinf_grid(a0: np.ndarray, a: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    min_c max_ω ‖A0(ω) + Σ c_i A_i(ω)‖₂ subject to |c_i| ≤ COEF_BOUND,
    then the minimum-norm c among costs within a relative ε of the optimum.

    Raises:
        DesignFailure: no installed conic solver reached optimality
    """
    m = a.shape[0]
    r0 = np.concatenate([a0.real, a0.imag], axis=1)   # (W, 2p)
    r = np.concatenate([a.real, a.imag], axis=2)      # (m, W, 2p)
    c = cp.Variable(m)
    stacked = cp.vstack([r0[:, k] + r[:, :, k].T @ c for k in range(r0.shape[1])])
    peak = cp.norm(stacked, 2, axis=0)
    box = [cp.abs(c) <= settings.COEF_BOUND]

    stage1 = cp.Problem(cp.Minimize(cp.max(peak)), box)
    if not _solve_problem(stage1) or c.value is None:
        raise DesignFailure(f"H∞ model matching failed (status {stage1.status})")
    best = float(stage1.value)
    coef = np.array(c.value, dtype=float)

    stage2 = cp.Problem(cp.Minimize(cp.sum_squares(c)),
                        box + [peak <= best * (1.0 + _TIE_EPS) + 1e-12])
    if _solve_problem(stage2) and c.value is not None:
        coef = np.array(c.value, dtype=float)
    cost = float(np.max(np.linalg.norm(a0 + np.tensordot(coef, a, axes=1), axis=1)))
    return coef, cost


def _trapezoid_weights(w: np.ndarray) -> np.ndarray:
    dw = np.diff(w)
    wts = np.zeros_like(w)
    wts[:-1] += 0.5 * dw
    wts[1:] += 0.5 * dw
    return wts


def solve_h2_grid(a0: np.ndarray, a: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Weighted least squares for (1/π)∫|A0 + Σ c_i A_i|² dω on the grid.

    lstsq returns the minimum-norm coefficients when the fit is not unique.
    """
    sw = np.sqrt(_trapezoid_weights(w) / np.pi)[:, None]
    b = -np.concatenate([(a0.real * sw).ravel(), (a0.imag * sw).ravel()])
    mat = np.stack([np.concatenate([(ai.real * sw).ravel(), (ai.imag * sw).ravel()]) for ai in a], axis=1)
    coef, *_ = np.linalg.lstsq(mat, b, rcond=1e-10)
    resid = mat @ coef - b
    return coef, float(np.sqrt(np.sum(resid ** 2)))


def _assemble(problem: AffineProblem, qs: Sequence[RationalFn]) -> TfMatrix:
    entries = []
    for r, base in enumerate(problem.t1):
        acc = base
        for t2, q in zip(problem.t2, qs):
            if not q.is_zero():
                acc = acc + t2[r] * q
        entries.append(acc)
    return TfMatrix.column(entries)


def solve_affine(problem: AffineProblem, basis: QBasis, norm: NormKind,
                 w: Optional[np.ndarray] = None, index: int = 0,
                 strict: bool = False) -> LocalDesign:
    """
    Solve one affine design problem over the basis and certify the result.

    Args:
        problem: T₁ and one T₂ column per free parameter
        basis: parameter basis (shared by all free parameters)
        norm: H2 or H∞
        w: frequency grid (settings grid by default)
        index: vehicle index for logging
        strict: raise instead of reporting saturation or a grid that misses the peak

    Returns:
        LocalDesign with the first parameter in q and the others in extra

    Raises:
        BasisTooSmall: coefficients saturate and strict is set
        DesignFailure: certified H∞ norm above the grid value and strict is set
    """
    norm = NormKind(norm)
    w = freq_grid() if w is None else w
    a0, a = _grid_matrices(problem, basis, w)
    if norm == NormKind.HINF:
        coef, grid_cost = solve_hinf_grid(a0, a)
    else:
        coef, grid_cost = solve_h2_grid(a0, a, w)

    m = basis.size
    qs = [basis.combine(coef[i * m:(i + 1) * m]) for i in range(len(problem.t2))]
    closed = _assemble(problem, qs)
    cost = hinf_norm(closed) if norm == NormKind.HINF else h2_norm(closed)
    certified = norm != NormKind.HINF or cost <= grid_cost * (1.0 + _CERT_EPS) + 1e-9
    if not certified:
        msg = f"vehicle {index}: certified H∞ norm {cost:.6g} exceeds grid value {grid_cost:.6g}"
        if strict:
            raise DesignFailure(msg)
        logger.warning(msg)

    saturated = bool(np.max(np.abs(coef), initial=0.0) >= 0.999 * settings.COEF_BOUND)
    if saturated:
        msg = f"vehicle {index}: basis coefficients saturate at {settings.COEF_BOUND}"
        if strict:
            raise BasisTooSmall(msg)
        logger.warning(msg)
    return LocalDesign(index=index, q=qs[0], coefficients=coef, grid_cost=grid_cost, cost=cost,
                       saturated=saturated, extra=tuple(qs[1:]), certified=certified)


# ============================================================================
# Problem data
# ============================================================================

def _check_index(cfg: PlatoonConfig, j: int):
    if not 1 <= j <= cfg.n:
        raise ValueError(f"vehicle index {j} outside 1..{cfg.n}")


def local_problem(dcf: PlatoonDcf, j: int) -> AffineProblem:
    """[T_zjwj; T_ujwj] = [−Ỹ·Ñ·H·Φ_j; −X̃·Ñ] + [H·N·Ñ·H·Φ_j; −H·M·Ñ]·Q_jj."""
    cfg, sc = dcf.cfg, dcf.scalar
    H = hpow(cfg.h, 1)
    phi = cfg.phi(j)
    t1 = (-sc.Y * sc.N * H * phi, -sc.X * sc.N)
    t2 = (H * sc.N * sc.N * H * phi, -H * sc.M * sc.N)
    return AffineProblem(t1, (t2,))


def spacing_problem(dcf: PlatoonDcf, j: int, two_parameter: bool = False) -> AffineProblem:
    """
    T_zjwj alone. With two_parameter the upper neighbour Q_j(j+1) of a full Q
    enters as a second free parameter.
    """
    cfg, sc = dcf.cfg, dcf.scalar
    H = hpow(cfg.h, 1)
    phi = cfg.phi(j)
    t1 = (-sc.Y * sc.N * H * phi,)
    t2 = [(H * sc.N * sc.N * H * phi,)]
    if two_parameter:
        t2.append((-sc.N * sc.N * H * phi,))
    return AffineProblem(t1, tuple(t2))


def h2_channel_problem(dcf: PlatoonDcf, j: int) -> AffineProblem:
    """Entries of T_zw that depend on Q_jj: (j, j) and, for j ≥ 2, (j, j−1)."""
    cfg, sc = dcf.cfg, dcf.scalar
    H = hpow(cfg.h, 1)
    t1 = [-sc.Y * sc.N * H * cfg.phi(j)]
    t2 = [H * sc.N * sc.N * H * cfg.phi(j)]
    if j >= 2:
        t1.append(sc.Y * sc.N * cfg.phi(j - 1))
        t2.append(-H * sc.N * sc.N * cfg.phi(j - 1))
    return AffineProblem(tuple(t1), (tuple(t2),))


# ============================================================================
# Designs
# ============================================================================

def local_hinf_design(cfg: PlatoonConfig, dcf: PlatoonDcf, j: int,
                      basis: Optional[QBasis] = None) -> Tuple[RationalFn, float]:
    """
    Q_jj minimizing ‖[T_zjwj; T_ujwj]‖∞ over the basis.

    Returns:
        (Q_jj, certified H∞ norm)
    """
    d = design_local(cfg, dcf, j, NormKind.HINF, basis)
    return d.q, d.cost


def design_local(cfg: PlatoonConfig, dcf: PlatoonDcf, j: int, norm: NormKind,
                 basis: Optional[QBasis] = None, w: Optional[np.ndarray] = None) -> LocalDesign:
    """
    The per-vehicle design used by the pipelines: the local H∞ loop for
    NormKind.HINF, the Q_jj share of ‖T_zw‖₂ for NormKind.H2.
    """
    _check_index(cfg, j)
    basis = QBasis() if basis is None else basis
    problem = local_problem(dcf, j) if NormKind(norm) == NormKind.HINF else h2_channel_problem(dcf, j)
    d = solve_affine(problem, basis, norm, w, index=j)
    logger.info(f"vehicle {j}: {NormKind(norm).value} cost {d.cost:.6g}")
    return d


def local_optimal_qjj(dcf: PlatoonDcf, j: int, norm: NormKind,
                      basis: Optional[QBasis] = None) -> Tuple[RationalFn, float]:
    """
    Diagonal-only minimizer of ‖T_zjwj‖ and its cost.

    For h > 0 and j < n the diagonal problem runs over the basis extended by
    its H⁻¹ multiples. Substituting Q̃_jj = Q_jj − Q_j(j+1)·H⁻¹ maps the
    two-parameter problem over the plain basis onto exactly this family, so
    both problems share one feasible set and their grid optima must agree.

    Raises:
        DesignFailure: grid optima differ by more than 1e-3 relative
    """
    cfg = dcf.cfg
    _check_index(cfg, j)
    basis = QBasis() if basis is None else basis
    use_ext = cfg.h > 0 and j < cfg.n
    diag_basis = basis.with_headway(cfg.h) if use_ext else basis.plain()
    diag = solve_affine(spacing_problem(dcf, j), diag_basis, norm, index=j)
    if j < cfg.n:
        two = _two_parameter_design(dcf, j, norm, basis)
        rel = abs(diag.grid_cost - two.grid_cost) / max(two.grid_cost, 1e-12)
        if rel > 1e-3:
            raise DesignFailure(f"vehicle {j}: diagonal optimum {diag.grid_cost:.6g} "
                                f"vs two-parameter optimum {two.grid_cost:.6g}")
    return diag.q, diag.cost


def _two_parameter_design(dcf: PlatoonDcf, j: int, norm: NormKind, basis: QBasis) -> LocalDesign:
    return solve_affine(spacing_problem(dcf, j, two_parameter=True), basis.plain(), norm, index=j)


def two_parameter_optimum(dcf: PlatoonDcf, j: int, norm: NormKind,
                          basis: Optional[QBasis] = None) -> float:
    """Optimal ‖T_zjwj‖ over (Q_jj, Q_j(j+1)) of a full Q, both in the plain basis."""
    basis = QBasis() if basis is None else basis
    return _two_parameter_design(dcf, j, norm, basis).cost


@dataclass
class PlatoonDesign:
    """All local designs of one platoon."""
    norm: NormKind
    q: DiagonalYoula
    local: List[LocalDesign]
    basis: QBasis

    @property
    def costs(self) -> List[float]:
        return [d.cost for d in self.local]

    @property
    def total_cost(self) -> Optional[float]:
        """‖T_zw‖₂ for H2 designs (the channels partition its entries)."""
        if self.norm != NormKind.H2:
            return None
        return float(np.sqrt(sum(c ** 2 for c in self.costs)))


def design_platoon(cfg: PlatoonConfig, dcf: PlatoonDcf, norm: NormKind,
                   basis: Optional[QBasis] = None, workers: Optional[int] = None,
                   w: Optional[np.ndarray] = None) -> PlatoonDesign:
    """
    Run the n independent local designs, in parallel when workers > 1.

    Results are collected in vehicle order, so the outcome does not depend on
    the schedule.
    """
    basis = QBasis() if basis is None else basis
    workers = settings.DESIGN_WORKERS if workers is None else workers
    jobs = range(1, cfg.n + 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            local = list(pool.map(lambda j: design_local(cfg, dcf, j, norm, basis, w), jobs))
    else:
        local = [design_local(cfg, dcf, j, norm, basis, w) for j in jobs]
    return PlatoonDesign(norm=NormKind(norm), q=DiagonalYoula(tuple(d.q for d in local)),
                         local=local, basis=basis)


def h2_design(cfg: PlatoonConfig, dcf: PlatoonDcf,
              basis: Optional[QBasis] = None) -> Tuple[DiagonalYoula, float]:
    """Diagonal Q minimizing ‖(Ỹ℘ − H·N℘·Q)·Ñ℘·T·Φ‖₂; returns (Q, cost)."""
    design = design_platoon(cfg, dcf, NormKind.H2, basis)
    return design.q, design.total_cost


def full_h2_design(cfg: PlatoonConfig, dcf: PlatoonDcf,
                   basis: Optional[QBasis] = None) -> Tuple[TfMatrix, float]:
    """
    Unconstrained (full) Q minimizing ‖T_zw‖₂, every entry in the basis.

    Row i of T_zw = −(Ỹ − N·Q)·Ñ depends only on row i of Q, so the rows are
    solved one by one.
    """
    basis = QBasis() if basis is None else basis
    n = cfg.n
    sc = dcf.scalar
    H = hpow(cfg.h, 1)
    Nt = dcf.Nt
    rows, total = [], 0.0
    for i in range(n):
        t1 = tuple(-sc.Y * Nt[i, j] for j in range(n))
        t2 = tuple(tuple(H * sc.N * Nt[l, j] for j in range(n)) for l in range(n))
        d = solve_affine(AffineProblem(t1, t2), basis, NormKind.H2, index=i + 1)
        rows.append((d.q,) + d.extra)
        total += d.cost ** 2
    return TfMatrix(rows), float(np.sqrt(total))


def homogeneous_h2_optimal(dcf: PlatoonDcf,
                           basis: Optional[QBasis] = None) -> Tuple[RationalFn, float]:
    """
    Per-channel optimum Q_o of ‖(Ỹ℘ − N℘·Q)·Ñ℘‖₂ for a homogeneous, h = 0 platoon.

    D{Q_o, …, Q_o} is H2 optimal; T_zw then has 2n − 1 identical nonzero
    entries, so the returned bound is √(2n−1)·‖(Ỹ℘ − N℘·Q_o)·Ñ℘‖₂.

    Raises:
        RequiresHomogeneous: some Φ_k ≠ 1
        RequiresZeroHeadway: h > 0
        DesignFailure: the assembled ‖T_zw‖₂ does not reproduce the bound
    """
    cfg = dcf.cfg
    if not cfg.is_homogeneous():
        raise RequiresHomogeneous("homogeneous H2 optimum needs Φ_k = 1 for every vehicle")
    if cfg.h != 0.0:
        raise RequiresZeroHeadway("homogeneous H2 optimum needs h = 0")
    basis = QBasis() if basis is None else basis
    sc = dcf.scalar
    problem = AffineProblem((sc.Y * sc.N,), ((-sc.N * sc.N,),))
    d = solve_affine(problem, basis, NormKind.H2)
    bound = float(np.sqrt(2 * cfg.n - 1) * d.cost)

    full = h2_norm(lemma_maps(cfg, dcf, DiagonalYoula.uniform(d.q, cfg.n)).t_zw)
    if abs(full - bound) > _BOUND_EPS * max(bound, 1e-12):
        raise DesignFailure(f"assembled H2 cost {full:.6g} differs from channel bound {bound:.6g}")
    return d.q, bound


def leader_effort_h2(cfg: PlatoonConfig, dcf: PlatoonDcf,
                     basis: Optional[QBasis] = None) -> Tuple[RationalFn, float]:
    """
    Q_11 minimizing ‖T_uw0‖₂; T_ukw0 = (X̃ + H·M·Q_11)·Ñ·Φ_0·Φ_k⁻¹·H⁻ᵏ.

    Raises:
        InfiniteCost: T_uw0 not strictly proper
    """
    basis = QBasis() if basis is None else basis
    sc = dcf.scalar
    H = hpow(cfg.h, 1)
    t1, t2 = [], []
    for k in range(1, cfg.n + 1):
        tail = sc.N * cfg.phi(0) * cfg.phi(k).inv() * hpow(cfg.h, -k)
        t1.append(sc.X * tail)
        t2.append(H * sc.M * tail)
    if not all(f.is_strictly_proper() for f in t1 + t2):
        raise InfiniteCost("leader control effort map is not strictly proper")
    d = solve_affine(AffineProblem(tuple(t1), (tuple(t2),)), basis, NormKind.H2, index=1)
    return d.q, d.cost
