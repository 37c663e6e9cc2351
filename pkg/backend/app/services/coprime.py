"""
Coprime Factorization - 互质分解
Doubly coprime factorization of the scalar plant G_wp and the structured
platoon factorization built from it.

For a scalar plant the left and right factors coincide (M̃ = M, Ñ = N,
X̃ = X, Ỹ = Y); the scalar Bézout identity reads Y·M + X·N = 1.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as npoly

from backend.app.core.config import settings
from backend.app.core.errors import (
    BezoutViolation,
    DegenerateCancellation,
    NotStrictlyProper,
    UnstableParameter,
)
from backend.app.services.platoon_model import PlatoonConfig
from backend.app.services.tf_core import (
    Polynomial,
    RationalFn,
    StructureTag,
    TfMatrix,
    check_grid,
    hpow,
)

logger = logging.getLogger(__name__)

# remainder systems worse than this are treated as (near) pole/zero cancellations
_MAX_COND = 1e12
_NEAR_ROOT = 1e-6


@dataclass(frozen=True)
class ScalarDcf:
    """Stable coprime factors of G_wp = N/M with Y·M + X·N = 1."""
    M: RationalFn
    N: RationalFn
    X: RationalFn
    Y: RationalFn
    alpha: float
    g_wp: RationalFn

    # left factors of a scalar plant
    @property
    def Mt(self) -> RationalFn:
        return self.M

    @property
    def Nt(self) -> RationalFn:
        return self.N

    @property
    def Xt(self) -> RationalFn:
        return self.X

    @property
    def Yt(self) -> RationalFn:
        return self.Y


def _over_alpha(coeffs: np.ndarray, alpha: float, mult: int) -> RationalFn:
    """coeffs(s) / (s + α)^mult with the poles kept exact."""
    p = Polynomial(coeffs)
    if p.is_zero():
        return RationalFn.zero()
    return RationalFn(p.leading(), p.roots(), [-alpha] * mult)


def _remainder(p: np.ndarray, d: np.ndarray, size: int) -> np.ndarray:
    """p mod d padded to ``size`` ascending coefficients."""
    rem = npoly.polydiv(p, d)[1] if len(p) >= len(d) else p
    out = np.zeros(size)
    out[: min(size, len(rem))] = rem[:size]
    return out


def scalar_dcf(g_wp: RationalFn, alpha: Optional[float] = None) -> ScalarDcf:
    """
    Coprime factors that move only the unstable and slow plant poles to −α.

    The plant poles split into moved ones (Re p ≥ −α, monic product d_u of
    degree ν) and kept ones (Re p < −α, product d_k). With r = max(ν−1, 0):

        M = d_u/(s+α)^ν,  N = b/(d_k·(s+α)^ν)
        X = x/(s+α)^r,    Y = y/(d_k·(s+α)^r)

    where x·b ≡ d_k·(s+α)^(ν+r) (mod d_u) is a ν×ν remainder system and y
    is the exact quotient (d_k·(s+α)^(ν+r) − x·b)/d_u. Kept poles (Padé
    delay poles among them) never enter a linear solve, so the identity
    Y·M + X·N = 1 holds to rounding.

    Args:
        g_wp: strictly proper plant b/d
        alpha: factorization pole (settings.FACTOR_POLE)

    Raises:
        NotStrictlyProper: g_wp not strictly proper
        DegenerateCancellation: a moved pole is (nearly) cancelled by a zero

    Examples:
        >>> f = scalar_dcf(RationalFn.from_coeffs([1], [0, 0, 1]))
        >>> np.allclose(f.Y.num.coeffs, [3, 1]) and np.allclose(f.X.num.coeffs, [1, 3])
        True
    """
    alpha = settings.FACTOR_POLE if alpha is None else alpha
    if not g_wp.is_strictly_proper():
        raise NotStrictlyProper("G_wp must be strictly proper for the factorization")
    b = g_wp.num.coeffs
    poles = g_wp.poles
    moved = poles[poles.real >= -alpha]
    kept = poles[poles.real < -alpha]
    for p in moved:
        ref = np.sum(np.abs(b) * np.abs(p) ** np.arange(len(b)))
        if abs(npoly.polyval(p, b)) <= _NEAR_ROOT * ref:
            raise DegenerateCancellation(f"numerator nearly vanishes at pole {p:.6g}")

    nu = len(moved)
    r = max(nu - 1, 0)
    d_u = Polynomial.from_roots(moved).coeffs
    d_k = Polynomial.from_roots(kept).coeffs
    target = npoly.polymul(d_k, npoly.polyfromroots([-alpha] * (nu + r)).real) if nu else d_k

    cond = 1.0
    x = np.zeros(1)
    if nu:
        A = np.stack([_remainder(np.concatenate([np.zeros(i), b]), d_u, nu) for i in range(nu)], axis=1)
        rhs = _remainder(target, d_u, nu)
        col = np.linalg.norm(A, axis=0)
        col[col == 0.0] = 1.0
        cond = np.linalg.cond(A / col)
        if not np.isfinite(cond) or cond > _MAX_COND:
            raise DegenerateCancellation(f"remainder system condition number {cond:.3g}")
        x = np.linalg.solve(A / col, rhs) / col
    y = npoly.polydiv(npoly.polysub(target, npoly.polymul(x, b)), d_u)[0]
    yp = Polynomial(y)

    dcf = ScalarDcf(
        M=RationalFn(1.0, moved, [-alpha] * nu),
        N=RationalFn(g_wp.gain, g_wp.zeros, np.concatenate([kept, np.full(nu, -alpha, dtype=complex)])),
        X=_over_alpha(x, alpha, r),
        Y=RationalFn(yp.leading(), yp.roots(), np.concatenate([kept, np.full(r, -alpha, dtype=complex)])),
        alpha=alpha,
        g_wp=g_wp,
    )
    logger.debug(f"scalar_dcf: moved={nu}, kept={len(kept)}, α={alpha}, cond={cond:.3g}")
    return dcf


def scalar_bezout_residual(dcf: ScalarDcf, w: Optional[np.ndarray] = None) -> float:
    """max |[−Ñ M̃; Y X]·[−X̃ M; Ỹ N] − I| over the grid."""
    w = check_grid() if w is None else w
    M, N, X, Y = (f.freq(w) for f in (dcf.M, dcf.N, dcf.X, dcf.Y))
    p11 = N * X + M * Y - 1.0
    p12 = -N * M + M * N
    p21 = -Y * X + X * Y
    p22 = Y * M + X * N - 1.0
    return float(np.max(np.abs(np.stack([p11, p12, p21, p22]))))


# ============================================================================
# Platoon factorization
# ============================================================================

@dataclass(frozen=True)
class PlatoonDcf:
    """
    Structured doubly coprime factorization of the platoon TFM G = T·Φ·G_wp.

    Nt = Ñ℘·T·Φ, Mt = M̃℘·I, Y = Y℘·H⁻¹·T·Φ, X = X℘·H⁻¹·I,
    Xt = Φ⁻¹·T⁻¹·X̃℘, M = Φ⁻¹·T⁻¹·H·M℘, Yt = Ỹ℘·I, N = H·N℘·I.
    """
    cfg: PlatoonConfig
    scalar: ScalarDcf
    M: TfMatrix
    N: TfMatrix
    Mt: TfMatrix
    Nt: TfMatrix
    X: TfMatrix
    Y: TfMatrix
    Xt: TfMatrix
    Yt: TfMatrix
    bezout_residual: float = 0.0


def platoon_dcf(cfg: PlatoonConfig, alpha: Optional[float] = None) -> PlatoonDcf:
    """
    Build the structured factorization and verify the Bézout identity.

    Raises:
        BezoutViolation: residual above settings.BEZOUT_TOL
    """
    sc = scalar_dcf(cfg.base_plant_g_wp, alpha)
    n = cfg.n
    H = hpow(cfg.h, 1)
    Hi = hpow(cfg.h, -1)
    z = RationalFn.zero()
    bidiag = StructureTag.LOWER_BIDIAGONAL if n > 1 else StructureTag.DIAGONAL
    phi = [cfg.phi(k) for k in range(n + 1)]

    def lower_bidiagonal(diag_fn, sub_fn):
        rows = [[z] * n for _ in range(n)]
        for k in range(1, n + 1):
            rows[k - 1][k - 1] = diag_fn(k)
            if k < n:
                rows[k][k - 1] = sub_fn(k)
        return TfMatrix(rows, bidiag)

    def lower_toeplitz(entry_fn):
        rows = [[entry_fn(i, j) if j <= i else z for j in range(1, n + 1)] for i in range(1, n + 1)]
        return TfMatrix(rows, StructureTag.LOWER_TRIANGULAR)

    Nt = lower_bidiagonal(lambda k: sc.N * H * phi[k], lambda k: -sc.N * phi[k])
    Y = lower_bidiagonal(lambda k: sc.Y * phi[k], lambda k: -sc.Y * Hi * phi[k])
    Mt = TfMatrix.identity(n) * sc.M
    X = TfMatrix.identity(n) * (sc.X * Hi)
    Xt = lower_toeplitz(lambda i, j: phi[i].inv() * hpow(cfg.h, -(i - j + 1)) * sc.X)
    M = lower_toeplitz(lambda i, j: phi[i].inv() * hpow(cfg.h, -(i - j)) * sc.M)
    Yt = TfMatrix.identity(n) * sc.Y
    N = TfMatrix.identity(n) * (H * sc.N)

    dcf = PlatoonDcf(cfg=cfg, scalar=sc, M=M, N=N, Mt=Mt, Nt=Nt, X=X, Y=Y, Xt=Xt, Yt=Yt)
    residual = verify_bezout(dcf)
    if residual > settings.BEZOUT_TOL:
        raise BezoutViolation(f"Bézout residual {residual:.3g} exceeds {settings.BEZOUT_TOL}")
    return replace(dcf, bezout_residual=residual)


def verify_bezout(dcf: PlatoonDcf, w: Optional[np.ndarray] = None) -> float:
    """
    max over ω of |[−Ñ M̃; Y X]·[−X̃ M; Ỹ N] − I|.

    Returns:
        Largest absolute entry of the residual on the check grid
    """
    w = check_grid() if w is None else w
    n = dcf.cfg.n
    ev = {name: getattr(dcf, name).evaluate(w) for name in ("M", "N", "Mt", "Nt", "X", "Y", "Xt", "Yt")}
    left = np.block([[-ev["Nt"], ev["Mt"]], [ev["Y"], ev["X"]]])
    right = np.block([[-ev["Xt"], ev["M"]], [ev["Yt"], ev["N"]]])
    prod = np.einsum("wij,wjk->wik", left, right)
    return float(np.max(np.abs(prod - np.eye(2 * n))))


def shift_dcf(dcf: PlatoonDcf, q: TfMatrix) -> PlatoonDcf:
    """
    Youla shift: X_Q = X + Q·M̃, X̃_Q = X̃ + M·Q, Y_Q = Y − Q·Ñ, Ỹ_Q = Ỹ − N·Q.

    Raises:
        UnstableParameter: Q has unstable or improper entries
        BezoutViolation: shifted factorization fails the identity
    """
    if not q.is_stable() or not q.is_proper():
        raise UnstableParameter("Youla parameter must be stable and proper")
    shifted = replace(
        dcf,
        X=dcf.X + q @ dcf.Mt,
        Xt=dcf.Xt + dcf.M @ q,
        Y=dcf.Y - q @ dcf.Nt,
        Yt=dcf.Yt - dcf.N @ q,
    )
    residual = verify_bezout(shifted)
    if residual > settings.BEZOUT_TOL:
        raise BezoutViolation(f"shifted Bézout residual {residual:.3g}")
    return replace(shifted, bezout_residual=residual)
