"""
Transfer Function Core - 连续时间有理传递函数代数
Rational functions in s, rational matrices with structure tags, state-space
realizations, H2 / H∞ norms and Padé delay approximation.

RationalFn keeps its denominator as an explicit pole list so that poles
introduced by construction (factorization poles, H⁻¹ = 1/(hs+1), Φ_k) stay
exact through products and can be cancelled exactly later on.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import control
import numpy as np
import scipy.linalg
from numpy.polynomial import polynomial as npoly

from backend.app.core.config import settings
from backend.app.core.errors import (
    DegreeOverflow,
    DivisionByZeroFn,
    ImproperSystem,
    NegativeDelay,
    NotStrictlyProper,
    SingularFactor,
    StructureViolation,
    TransferFunctionError,
    UnstableSystem,
)

logger = logging.getLogger(__name__)

Scalar = Union[int, float]

# pole values closer than this (relative) are treated as the same pole
_SAME_POLE = 1e-12
# leading coefficients below this fraction of the operands are cancellation noise
_NOISE = 1e-13


# ============================================================================
# Polynomial
# ============================================================================

class Polynomial:
    """
    Real polynomial with ascending coefficients.

    The zero polynomial is stored canonically as ``(0.0,)``.
    """

    __slots__ = ("_c",)

    def __init__(self, coeffs: Iterable[float]):
        c = np.array(coeffs, dtype=float, ndmin=1)
        if c.size == 0:
            c = np.zeros(1)
        nz = np.flatnonzero(c)
        c = c[: nz[-1] + 1] if nz.size else np.zeros(1)
        c.setflags(write=False)
        self._c = c

    @classmethod
    def from_roots(cls, roots: Sequence[complex], gain: float = 1.0) -> "Polynomial":
        return cls(gain * _real_poly(roots))

    @property
    def coeffs(self) -> np.ndarray:
        return self._c

    @property
    def degree(self) -> int:
        return len(self._c) - 1

    def is_zero(self) -> bool:
        return self._c.size == 1 and self._c[0] == 0.0

    def leading(self) -> float:
        return float(self._c[-1])

    def roots(self) -> np.ndarray:
        if self.degree < 1:
            return np.zeros(0, dtype=complex)
        return _clean_roots(npoly.polyroots(self._c))

    def __call__(self, s):
        return npoly.polyval(s, self._c)

    def __add__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial(npoly.polyadd(self._c, _as_poly(other)._c))

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial(npoly.polysub(self._c, _as_poly(other)._c))

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial(npoly.polymul(self._c, _as_poly(other)._c))

    __rmul__ = __mul__

    def __neg__(self) -> "Polynomial":
        return Polynomial(-self._c)

    def __repr__(self) -> str:
        return f"Polynomial({list(self._c)})"


def _as_poly(p) -> Polynomial:
    return p if isinstance(p, Polynomial) else Polynomial([float(p)])


def _real_poly(roots: Sequence[complex]) -> np.ndarray:
    roots = np.asarray(roots, dtype=complex)
    if roots.size == 0:
        return np.ones(1)
    return np.real(npoly.polyfromroots(roots))


def _clean_roots(roots: np.ndarray) -> np.ndarray:
    """Snap near-real roots to the real axis and sort deterministically."""
    roots = np.asarray(roots, dtype=complex)
    small = np.abs(roots.imag) <= 1e-12 * np.maximum(1.0, np.abs(roots))
    roots = np.where(small, roots.real + 0j, roots)
    order = np.lexsort((roots.imag, roots.real))
    return roots[order]


# ============================================================================
# RationalFn
# ============================================================================

class RationalFn:
    """
    Real-rational scalar transfer function in zero/pole/gain form.

    f(s) = gain · Π(s − z_i) / Π(s − p_j); the denominator is monic and common
    roots are cancelled to ``settings.CANCEL_TOL``. Instances are immutable.
    """

    __slots__ = ("_k", "_z", "_p")

    def __init__(self, gain: float, zeros: Sequence[complex] = (), poles: Sequence[complex] = ()):
        k, z, p = _canonical(float(gain), np.asarray(zeros, dtype=complex), np.asarray(poles, dtype=complex))
        z.setflags(write=False)
        p.setflags(write=False)
        self._k, self._z, self._p = k, z, p

    # --- constructors -----------------------------------------------------

    @classmethod
    def const(cls, value: float) -> "RationalFn":
        return cls(float(value))

    @classmethod
    def zero(cls) -> "RationalFn":
        return cls(0.0)

    @classmethod
    def one(cls) -> "RationalFn":
        return cls(1.0)

    @classmethod
    def s(cls) -> "RationalFn":
        """The Laplace variable itself (improper)."""
        return cls(1.0, [0.0], [])

    @classmethod
    def from_coeffs(cls, num: Sequence[float], den: Sequence[float]) -> "RationalFn":
        """Build from ascending numerator / denominator coefficients."""
        return cls.from_polys(Polynomial(num), Polynomial(den))

    @classmethod
    def from_polys(cls, num: Polynomial, den: Polynomial) -> "RationalFn":
        if den.is_zero():
            raise DivisionByZeroFn("denominator polynomial is identically zero")
        if num.is_zero():
            return cls.zero()
        return cls(num.leading() / den.leading(), num.roots(), den.roots())

    # --- accessors --------------------------------------------------------

    @property
    def gain(self) -> float:
        return self._k

    @property
    def zeros(self) -> np.ndarray:
        return self._z

    @property
    def poles(self) -> np.ndarray:
        return self._p

    @property
    def num(self) -> Polynomial:
        return Polynomial(self._k * _real_poly(self._z)) if self._k != 0.0 else Polynomial([0.0])

    @property
    def den(self) -> Polynomial:
        return Polynomial(_real_poly(self._p))

    def is_zero(self) -> bool:
        return self._k == 0.0

    @property
    def relative_degree(self) -> int:
        if self.is_zero():
            return 10 ** 6
        return len(self._p) - len(self._z)

    def is_proper(self) -> bool:
        return self.relative_degree >= 0

    def is_strictly_proper(self) -> bool:
        return self.relative_degree > 0

    def is_constant(self) -> bool:
        return self._z.size == 0 and self._p.size == 0

    def __call__(self, s):
        """Evaluate at complex points s (scalar or array)."""
        s = np.asarray(s, dtype=complex)
        out = np.full(s.shape, self._k, dtype=complex)
        if self._k == 0.0:
            return out
        nz, np_ = self._z.size, self._p.size
        m = min(nz, np_)
        for i in range(m):
            out = out * (s - self._z[i]) / (s - self._p[i])
        for i in range(m, nz):
            out = out * (s - self._z[i])
        for i in range(m, np_):
            out = out / (s - self._p[i])
        return out

    def freq(self, w) -> np.ndarray:
        """Frequency response at ω (rad/s)."""
        return self(1j * np.asarray(w, dtype=float))

    # --- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "RationalFn":
        return _add(self, _as_rational(other))

    __radd__ = __add__

    def __sub__(self, other) -> "RationalFn":
        return _add(self, -_as_rational(other))

    def __rsub__(self, other) -> "RationalFn":
        return _add(_as_rational(other), -self)

    def __neg__(self) -> "RationalFn":
        return RationalFn(-self._k, self._z, self._p)

    def __mul__(self, other) -> "RationalFn":
        other = _as_rational(other)
        if self.is_zero() or other.is_zero():
            return RationalFn.zero()
        return RationalFn(self._k * other._k,
                          np.concatenate([self._z, other._z]),
                          np.concatenate([self._p, other._p]))

    __rmul__ = __mul__

    def inv(self) -> "RationalFn":
        if self.is_zero():
            raise DivisionByZeroFn("cannot invert the zero rational function")
        return RationalFn(1.0 / self._k, self._p, self._z)

    def __truediv__(self, other) -> "RationalFn":
        return self * _as_rational(other).inv()

    def __rtruediv__(self, other) -> "RationalFn":
        return _as_rational(other) * self.inv()

    def __pow__(self, exponent: int) -> "RationalFn":
        if exponent < 0:
            return self.inv() ** (-exponent)
        result = RationalFn.one()
        for _ in range(exponent):
            result = result * self
        return result

    def __repr__(self) -> str:
        return f"RationalFn(num={list(np.round(self.num.coeffs, 12))}, den={list(np.round(self.den.coeffs, 12))})"


def _as_rational(x) -> RationalFn:
    if isinstance(x, RationalFn):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return RationalFn.const(float(x))
    raise TypeError(f"cannot convert {type(x).__name__} to RationalFn")


def _canonical(k: float, z: np.ndarray, p: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    if not np.isfinite(k):
        raise TransferFunctionError(f"non-finite gain {k}")
    if k == 0.0:
        return 0.0, np.zeros(0, dtype=complex), np.zeros(0, dtype=complex)
    z = _clean_roots(z)
    p = _clean_roots(p)
    if z.size and p.size:
        tol = settings.CANCEL_TOL
        keep_z = np.ones(z.size, dtype=bool)
        keep_p = np.ones(p.size, dtype=bool)
        for i in range(z.size):
            cand = np.flatnonzero(keep_p)
            if cand.size == 0:
                break
            dist = np.abs(p[cand] - z[i])
            j = int(np.argmin(dist))
            if dist[j] <= tol * max(1.0, abs(p[cand[j]])):
                keep_z[i] = False
                keep_p[cand[j]] = False
        z, p = z[keep_z], p[keep_p]
    if z.size > settings.MAX_DEGREE or p.size > settings.MAX_DEGREE:
        raise DegreeOverflow(
            f"degree ({z.size}/{p.size}) exceeds cap {settings.MAX_DEGREE}")
    return k, z, p


def _pole_union(pa: np.ndarray, pb: np.ndarray):
    """Multiset union of two pole lists; returns (union, missing_from_a, missing_from_b)."""
    used = np.zeros(pa.size, dtype=bool)
    missing_from_a = []
    for q in pb:
        cand = np.flatnonzero(~used)
        hit = None
        if cand.size:
            dist = np.abs(pa[cand] - q)
            j = int(np.argmin(dist))
            if dist[j] <= _SAME_POLE * max(1.0, abs(q)):
                hit = cand[j]
        if hit is None:
            missing_from_a.append(q)
        else:
            used[hit] = True
    missing_from_b = pa[~used]
    union = np.concatenate([pa, np.asarray(missing_from_a, dtype=complex)])
    return union, np.asarray(missing_from_a, dtype=complex), missing_from_b


def _deflate(num: np.ndarray, poles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Divide known pole factors out of a numerator wherever it vanishes there."""
    tol = settings.CANCEL_TOL
    poles = np.asarray(poles, dtype=complex)
    changed = True
    while changed and poles.size and len(num) > 1:
        changed = False
        for idx, p in enumerate(poles):
            if p.imag < 0:
                continue
            ref = np.sum(np.abs(num) * np.abs(p) ** np.arange(len(num)))
            if ref == 0.0 or abs(npoly.polyval(p, num)) > tol * ref:
                continue
            if p.imag == 0.0:
                num = npoly.polydiv(num, np.array([-p.real, 1.0]))[0]
                poles = np.delete(poles, idx)
            else:
                dist = np.abs(poles - np.conj(p))
                dist[idx] = np.inf
                partner = int(np.argmin(dist))
                if dist[partner] > _SAME_POLE * max(1.0, abs(p)) or len(num) < 3:
                    continue
                quad = np.array([abs(p) ** 2, -2.0 * p.real, 1.0])
                num = npoly.polydiv(num, quad)[0]
                poles = np.delete(poles, [idx, partner])
            changed = True
            break
    return np.real(num), poles


def _add(a: RationalFn, b: RationalFn) -> RationalFn:
    if a.is_zero():
        return b
    if b.is_zero():
        return a
    union, extra_a, extra_b = _pole_union(a.poles, b.poles)
    na = a.gain * _real_poly(np.concatenate([a.zeros, extra_a]))
    nb = b.gain * _real_poly(np.concatenate([b.zeros, extra_b]))
    num = npoly.polyadd(na, nb)
    scale = max(np.max(np.abs(na)), np.max(np.abs(nb)))
    if np.max(np.abs(num)) <= 1e-12 * scale:
        return RationalFn.zero()
    while len(num) > 1 and abs(num[-1]) <= _NOISE * scale:
        num = num[:-1]
    num, poles = _deflate(num, union)
    zeros = npoly.polyroots(num) if len(num) > 1 else np.zeros(0)
    return RationalFn(float(num[-1]), zeros, poles)


def rational_arith(a: RationalFn, b: RationalFn, op: str) -> RationalFn:
    """
    Exact rational arithmetic followed by canonical reduction.

    Args:
        a, b: operands
        op: one of "add", "sub", "mul", "div"

    Raises:
        DivisionByZeroFn: for div by the zero function

    Examples:
        >>> f = rational_arith(RationalFn.from_coeffs([1], [1, 1]), RationalFn.from_coeffs([0, 1], [1, 1]), "add")
        >>> f.is_constant() and abs(f.gain - 1.0) < 1e-12
        True
    """
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    raise ValueError(f"unknown op {op!r}")


def is_stable(f: RationalFn, eps: Optional[float] = None) -> bool:
    """True iff every pole has real part < −ε_stab."""
    eps = settings.STAB_EPS if eps is None else eps
    return bool(np.all(f.poles.real < -eps))


def is_unimodular(f: RationalFn) -> bool:
    """Proper, stable, biproper and minimum phase."""
    if f.is_zero() or f.relative_degree != 0:
        return False
    return is_stable(f) and bool(np.all(f.zeros.real < -settings.STAB_EPS))


def hpow(h: float, k: int) -> RationalFn:
    """H(s)^k with H(s) = hs + 1 (k may be negative)."""
    if h == 0.0:
        return RationalFn.one()
    return RationalFn(h, [-1.0 / h], []) ** k


def pade_approx(delay_seconds: float, order: Optional[int] = None) -> RationalFn:
    """
    Diagonal Padé approximant of e^{−θs}.

    Coefficients come from python-control's ``pade``; the result is all-pass.

    Examples:
        >>> p = pade_approx(0.03, 1)
        >>> np.allclose(p.num.coeffs / p.num.coeffs[0], [1.0, -0.015])
        True
    """
    order = settings.PADE_ORDER if order is None else order
    if delay_seconds < 0:
        raise NegativeDelay(f"delay must be >= 0, got {delay_seconds}")
    if order < 1:
        raise TransferFunctionError(f"Padé order must be >= 1, got {order}")
    if delay_seconds == 0:
        return RationalFn.one()
    num, den = control.pade(delay_seconds, order)
    return RationalFn.from_coeffs(np.asarray(num, dtype=float)[::-1], np.asarray(den, dtype=float)[::-1])


def freq_grid(points: Optional[int] = None,
              w_min: Optional[float] = None,
              w_max: Optional[float] = None) -> np.ndarray:
    """Log-spaced frequency grid in rad/s."""
    points = settings.GRID_POINTS if points is None else points
    w_min = settings.GRID_W_MIN if w_min is None else w_min
    w_max = settings.GRID_W_MAX if w_max is None else w_max
    return np.logspace(np.log10(w_min), np.log10(w_max), points)


def check_grid() -> np.ndarray:
    """The 50-point grid used for identity checks."""
    return freq_grid(settings.CHECK_GRID_POINTS)


# ============================================================================
# TfMatrix
# ============================================================================

class StructureTag(str, Enum):
    """Sparsity pattern of a rational matrix."""
    FULL = "full"
    DIAGONAL = "diagonal"
    LOWER_TRIANGULAR = "lower_triangular"
    LOWER_BIDIAGONAL = "lower_bidiagonal"


def _pattern_holds(entries, tag: StructureTag) -> bool:
    n = len(entries)
    m = len(entries[0]) if n else 0
    if tag == StructureTag.FULL:
        return True
    if n != m:
        return False
    for i in range(n):
        for j in range(m):
            if tag == StructureTag.DIAGONAL:
                must_zero = i != j
            elif tag == StructureTag.LOWER_TRIANGULAR:
                must_zero = j > i
            else:
                must_zero = j > i or i - j > 1
            if must_zero and not entries[i][j].is_zero():
                return False
    return True


class TfMatrix:
    """
    Matrix of RationalFn entries carrying a verified structure tag.

    When no tag is given the tightest matching one is inferred.
    """

    __slots__ = ("_rows", "_tag")

    def __init__(self, entries: Sequence[Sequence[Union[RationalFn, Scalar]]],
                 structure_tag: Optional[StructureTag] = None):
        rows = tuple(tuple(_as_rational(e) for e in row) for row in entries)
        if not rows or any(len(r) != len(rows[0]) for r in rows) or not rows[0]:
            raise StructureViolation("TfMatrix entries must form a non-empty rectangular grid")
        if structure_tag is None:
            structure_tag = _infer(rows)
        elif not _pattern_holds(rows, structure_tag):
            raise StructureViolation(f"entries do not satisfy structure tag {structure_tag.value}")
        self._rows = rows
        self._tag = StructureTag(structure_tag)

    # --- constructors -----------------------------------------------------

    @classmethod
    def identity(cls, n: int) -> "TfMatrix":
        return cls.diag([RationalFn.one()] * n)

    @classmethod
    def zeros(cls, n: int, m: int) -> "TfMatrix":
        return cls([[RationalFn.zero()] * m for _ in range(n)])

    @classmethod
    def diag(cls, elems: Sequence[Union[RationalFn, Scalar]]) -> "TfMatrix":
        n = len(elems)
        z = RationalFn.zero()
        return cls([[_as_rational(elems[i]) if i == j else z for j in range(n)] for i in range(n)],
                   StructureTag.DIAGONAL)

    @classmethod
    def column(cls, elems: Sequence[Union[RationalFn, Scalar]]) -> "TfMatrix":
        return cls([[e] for e in elems], StructureTag.FULL)

    @classmethod
    def vstack(cls, blocks: Sequence["TfMatrix"]) -> "TfMatrix":
        rows = [row for b in blocks for row in b.rows]
        return cls(rows, StructureTag.FULL)

    @classmethod
    def block(cls, blocks: Sequence[Sequence["TfMatrix"]]) -> "TfMatrix":
        rows = []
        for brow in blocks:
            for i in range(brow[0].shape[0]):
                rows.append([e for b in brow for e in b.rows[i]])
        return cls(rows)

    # --- accessors --------------------------------------------------------

    @property
    def rows(self) -> Tuple[Tuple[RationalFn, ...], ...]:
        return self._rows

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self._rows), len(self._rows[0])

    @property
    def structure_tag(self) -> StructureTag:
        return self._tag

    def __getitem__(self, idx: Tuple[int, int]) -> RationalFn:
        i, j = idx
        return self._rows[i][j]

    def entries(self):
        for i, row in enumerate(self._rows):
            for j, e in enumerate(row):
                yield i, j, e

    def col(self, j: int) -> "TfMatrix":
        return TfMatrix([[row[j]] for row in self._rows], StructureTag.FULL)

    def is_proper(self) -> bool:
        return all(e.is_proper() for _, _, e in self.entries())

    def is_strictly_proper(self) -> bool:
        return all(e.is_strictly_proper() for _, _, e in self.entries())

    def is_stable(self) -> bool:
        return all(is_stable(e) for _, _, e in self.entries())

    def evaluate(self, w: np.ndarray) -> np.ndarray:
        """Frequency response, shape (len(w), n, m)."""
        w = np.asarray(w, dtype=float)
        n, m = self.shape
        out = np.zeros((w.size, n, m), dtype=complex)
        for i, j, e in self.entries():
            if not e.is_zero():
                out[:, i, j] = e.freq(w)
        return out

    # --- arithmetic -------------------------------------------------------

    def _check_same(self, other: "TfMatrix"):
        if self.shape != other.shape:
            raise StructureViolation(f"shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other: "TfMatrix") -> "TfMatrix":
        self._check_same(other)
        return TfMatrix([[a + b for a, b in zip(ra, rb)] for ra, rb in zip(self._rows, other._rows)])

    def __sub__(self, other: "TfMatrix") -> "TfMatrix":
        self._check_same(other)
        return TfMatrix([[a - b for a, b in zip(ra, rb)] for ra, rb in zip(self._rows, other._rows)])

    def __neg__(self) -> "TfMatrix":
        return TfMatrix([[-a for a in r] for r in self._rows], self._tag)

    def __matmul__(self, other: "TfMatrix") -> "TfMatrix":
        n, k = self.shape
        k2, m = other.shape
        if k != k2:
            raise StructureViolation(f"inner dimensions differ: {self.shape} @ {other.shape}")
        out = []
        for i in range(n):
            row = []
            for j in range(m):
                acc = RationalFn.zero()
                for l in range(k):
                    a, b = self._rows[i][l], other._rows[l][j]
                    if a.is_zero() or b.is_zero():
                        continue
                    acc = acc + a * b
                row.append(acc)
            out.append(row)
        return TfMatrix(out)

    def __mul__(self, f) -> "TfMatrix":
        f = _as_rational(f)
        return TfMatrix([[a * f for a in r] for r in self._rows])

    __rmul__ = __mul__

    def solve_lower(self, rhs: "TfMatrix") -> "TfMatrix":
        """
        Solve L·X = rhs by forward substitution (L = self, lower triangular).

        Raises:
            SingularFactor: zero diagonal entry or non-triangular L
        """
        n, _ = self.shape
        if self._tag not in (StructureTag.DIAGONAL, StructureTag.LOWER_TRIANGULAR,
                             StructureTag.LOWER_BIDIAGONAL):
            raise SingularFactor("forward substitution requires a lower-triangular matrix")
        if any(self._rows[i][i].is_zero() for i in range(n)):
            raise SingularFactor("zero on the diagonal of a triangular factor")
        _, m = rhs.shape
        x = [[RationalFn.zero()] * m for _ in range(n)]
        for j in range(m):
            for i in range(n):
                acc = rhs[i, j]
                for l in range(i):
                    a = self._rows[i][l]
                    if a.is_zero() or x[l][j].is_zero():
                        continue
                    acc = acc - a * x[l][j]
                x[i][j] = acc / self._rows[i][i]
        return TfMatrix(x)

    def __repr__(self) -> str:
        return f"TfMatrix(shape={self.shape}, tag={self._tag.value})"


def _infer(rows) -> StructureTag:
    for tag in (StructureTag.DIAGONAL, StructureTag.LOWER_BIDIAGONAL, StructureTag.LOWER_TRIANGULAR):
        if _pattern_holds(rows, tag):
            return tag
    return StructureTag.FULL


def assert_proper(m: Union[RationalFn, TfMatrix], what: str) -> None:
    """Fail loudly when an assembled product came out improper."""
    ok = m.is_proper()
    if not ok:
        raise ImproperSystem(f"{what} is not proper")


def grid_residual(a: np.ndarray, b: np.ndarray) -> float:
    """Max |a − b| scaled by max(1, max|b|)."""
    a = np.asarray(a)
    b = np.asarray(b)
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0


def offdiag_max(values: np.ndarray) -> float:
    """Largest off-diagonal magnitude of a stack of square matrices (len(w), n, n)."""
    n = values.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return float(np.max(np.abs(values[:, mask]))) if n > 1 else 0.0


# ============================================================================
# State space
# ============================================================================

@dataclass(frozen=True)
class StateSpace:
    """Continuous-time realization (A, B, C, D)."""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n \
                or self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise StructureViolation(
                f"inconsistent realization shapes A{self.A.shape} B{self.B.shape} "
                f"C{self.C.shape} D{self.D.shape}")

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    def is_stable(self) -> bool:
        if self.nstates == 0:
            return True
        return bool(np.all(np.linalg.eigvals(self.A).real < -settings.STAB_EPS))

    def freqresp(self, w: np.ndarray) -> np.ndarray:
        """C(jωI − A)⁻¹B + D for every ω; shape (len(w), p, m)."""
        w = np.atleast_1d(np.asarray(w, dtype=float))
        out = np.empty((w.size,) + self.D.shape, dtype=complex)
        eye = np.eye(self.nstates)
        for idx, wk in enumerate(w):
            if self.nstates:
                out[idx] = self.C @ np.linalg.solve(1j * wk * eye - self.A, self.B) + self.D
            else:
                out[idx] = self.D
        return out


def _section_ss(num: np.ndarray, den: np.ndarray) -> StateSpace:
    """Controllable canonical form of num/den (ascending, den monic, deg num ≤ deg den)."""
    d = len(den) - 1
    num = np.concatenate([num, np.zeros(d + 1 - len(num))])
    if d == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.array([[num[0] / den[0]]]))
    b_d = num[d]
    A = np.zeros((d, d))
    A[:-1, 1:] = np.eye(d - 1)
    A[-1, :] = -den[:d]
    B = np.zeros((d, 1))
    B[-1, 0] = 1.0
    C = (num[:d] - b_d * den[:d]).reshape(1, d)
    return StateSpace(A, B, C, np.array([[b_d]]))


def _series(first: StateSpace, second: StateSpace) -> StateSpace:
    n1, n2 = first.nstates, second.nstates
    A = np.zeros((n1 + n2, n1 + n2))
    A[:n1, :n1] = first.A
    A[n1:, :n1] = second.B @ first.C
    A[n1:, n1:] = second.A
    B = np.vstack([first.B, second.B @ first.D])
    C = np.hstack([second.D @ first.C, second.C])
    return StateSpace(A, B, C, second.D @ first.D)


def _root_factors(roots: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Split conjugate-closed roots into real quadratic and linear ascending factors."""
    quads, lins = [], []
    for r in roots:
        if r.imag > 0:
            quads.append(np.array([abs(r) ** 2, -2.0 * r.real, 1.0]))
        elif r.imag == 0:
            lins.append(np.array([-r.real, 1.0]))
    return quads, lins


def _siso_ss(f: RationalFn) -> StateSpace:
    if f.is_zero():
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.zeros((1, 1)))
    if not f.is_proper():
        raise ImproperSystem(f"relative degree {f.relative_degree} < 0")
    pq, pl = _root_factors(f.poles)
    zq, zl = _root_factors(f.zeros)
    # pair real poles into quadratic sections
    sections = list(pq)
    while len(pl) >= 2:
        sections.append(npoly.polymul(pl.pop(), pl.pop()))
    sections.extend(pl)
    nums = [np.ones(1) for _ in sections]
    cap = [len(s) - 1 for s in sections]
    for q in zq:
        i = next(i for i, c in enumerate(cap) if c >= 2)
        nums[i] = npoly.polymul(nums[i], q)
        cap[i] -= 2
    for lin in zl:
        i = next(i for i, c in enumerate(cap) if c >= 1)
        nums[i] = npoly.polymul(nums[i], lin)
        cap[i] -= 1
    ss = StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.ones((1, 1)))
    for num, den in zip(nums, sections):
        ss = _series(ss, _section_ss(num, den))
    return StateSpace(ss.A, ss.B, f.gain * ss.C, f.gain * ss.D)


def _reachable_basis(A: np.ndarray, B: np.ndarray, tol: float) -> np.ndarray:
    """Orthonormal basis of the controllable subspace (block Arnoldi)."""
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A, 2), np.linalg.norm(B, 2))
    V = np.zeros((n, 0))
    W = B.copy()
    while V.shape[1] < n:
        for _ in range(2):
            W = W - V @ (V.T @ W)
        if W.size == 0:
            break
        U, s, _ = np.linalg.svd(W, full_matrices=False)
        keep = s > tol * scale
        if not np.any(keep):
            break
        U = U[:, keep]
        V = np.hstack([V, U])
        W = A @ U
    return V[:, :n]


def minimal(ss: StateSpace, tol: float = 1e-10) -> StateSpace:
    """Remove uncontrollable then unobservable directions (orthogonal projections)."""
    if ss.nstates == 0:
        return ss
    V = _reachable_basis(ss.A, ss.B, tol)
    A, B, C = V.T @ ss.A @ V, V.T @ ss.B, ss.C @ V
    if A.shape[0] == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, B.shape[1])), np.zeros((C.shape[0], 0)), ss.D)
    W = _reachable_basis(A.T, C.T, tol)
    return StateSpace(W.T @ A @ W, W.T @ B, C @ W, ss.D)


def to_state_space(f: Union[RationalFn, TfMatrix]) -> StateSpace:
    """
    Minimal state-space realization of a proper rational function or matrix.

    Scalar entries are realized as cascades of first/second order sections;
    matrices stack entry realizations and are then reduced.

    Raises:
        ImproperSystem: relative degree below zero
    """
    if isinstance(f, RationalFn):
        return minimal(_siso_ss(f))
    p, m = f.shape
    parts = [(i, j, _siso_ss(e)) for i, j, e in f.entries()]
    nx = sum(s.nstates for _, _, s in parts)
    A = np.zeros((nx, nx))
    B = np.zeros((nx, m))
    C = np.zeros((p, nx))
    D = np.zeros((p, m))
    o = 0
    for i, j, s in parts:
        k = s.nstates
        A[o:o + k, o:o + k] = s.A
        B[o:o + k, j] = s.B[:, 0]
        C[i, o:o + k] = s.C[0, :]
        D[i, j] = s.D[0, 0]
        o += k
    return minimal(StateSpace(A, B, C, D))


# ============================================================================
# Norms
# ============================================================================

def _entries_of(f: Union[RationalFn, TfMatrix]) -> List[RationalFn]:
    return [f] if isinstance(f, RationalFn) else [e for _, _, e in f.entries()]


def h2_norm(f: Union[RationalFn, TfMatrix]) -> float:
    """
    H2 norm via the observability Gramian: Aᵀ L + L A + CᵀC = 0, ‖f‖² = tr(Bᵀ L B).

    Raises:
        UnstableSystem: any pole with Re ≥ −ε_stab
        NotStrictlyProper: any entry with relative degree 0
    """
    entries = _entries_of(f)
    if not all(is_stable(e) for e in entries):
        raise UnstableSystem("H2 norm requires a stable system")
    if not all(e.is_strictly_proper() for e in entries):
        raise NotStrictlyProper("H2 norm requires a strictly proper system")
    ss = to_state_space(f)
    if ss.nstates == 0:
        return 0.0
    try:
        L = scipy.linalg.solve_continuous_lyapunov(ss.A.T, -ss.C.T @ ss.C)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise TransferFunctionError(f"Lyapunov solve failed: {e}") from e
    value = float(np.trace(ss.B.T @ L @ ss.B))
    return float(np.sqrt(max(value, 0.0)))


def _sigma_max(ss: StateSpace, w: np.ndarray) -> np.ndarray:
    resp = ss.freqresp(w)
    return np.array([np.linalg.norm(r, 2) for r in resp])


def _imag_axis_crossings(ss: StateSpace, gamma: float) -> np.ndarray:
    """Frequencies where γ is a singular value (imaginary Hamiltonian eigenvalues)."""
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    R = gamma ** 2 * np.eye(D.shape[1]) - D.T @ D
    Ri = np.linalg.inv(R)
    Ah = A + B @ Ri @ D.T @ C
    top = np.hstack([Ah, B @ Ri @ B.T])
    bot = np.hstack([-C.T @ (np.eye(D.shape[0]) + D @ Ri @ D.T) @ C, -Ah.T])
    eig = np.linalg.eigvals(np.vstack([top, bot]))
    on_axis = np.abs(eig.real) <= 1e-8 * np.maximum(1.0, np.abs(eig))
    freqs = np.sort(np.abs(eig[on_axis].imag))
    return freqs


def hinf_norm(f: Union[RationalFn, TfMatrix], tol: Optional[float] = None) -> float:
    """
    H∞ norm by bisection on γ with the Hamiltonian imaginary-axis test.

    The lower bound starts from a dense frequency grid; whenever the test
    finds crossings, σ_max at their midpoints raises the lower bound.

    Raises:
        UnstableSystem: any pole with Re ≥ −ε_stab
    """
    tol = settings.HINF_TOL if tol is None else tol
    entries = _entries_of(f)
    if not all(is_stable(e) for e in entries):
        raise UnstableSystem("H∞ norm requires a stable system")
    ss = to_state_space(f)
    d_norm = float(np.linalg.norm(ss.D, 2)) if ss.D.size else 0.0
    if ss.nstates == 0:
        return d_norm
    poles = np.abs(np.linalg.eigvals(ss.A))
    grid = np.unique(np.concatenate([[0.0], np.logspace(-4, 4, 400), poles[poles > 0]]))
    lo = max(d_norm, float(np.max(_sigma_max(ss, grid))))
    if lo == 0.0:
        return 0.0
    hi = _certified_upper(ss, lo, tol)
    iterations = 0
    while hi - lo > tol and iterations < 200:
        iterations += 1
        mid = 0.5 * (lo + hi)
        crossings = _imag_axis_crossings(ss, mid)
        if crossings.size == 0:
            hi = mid
            continue
        mids = 0.5 * (crossings[:-1] + crossings[1:]) if crossings.size > 1 else crossings
        lo = max(mid, float(np.max(_sigma_max(ss, mids))))
        if lo >= hi:
            hi = _certified_upper(ss, lo, tol)
    logger.debug(f"hinf_norm converged in {iterations} bisection steps: [{lo}, {hi}]")
    return 0.5 * (lo + hi)


def _certified_upper(ss: StateSpace, lo: float, tol: float) -> float:
    """Smallest tried γ above lo with no imaginary-axis crossing."""
    hi = lo * (1.0 + 1e-3) + tol
    for _ in range(60):
        if _imag_axis_crossings(ss, hi).size == 0:
            return hi
        hi = 2.0 * hi
    raise TransferFunctionError("H∞ upper bound search did not terminate")
