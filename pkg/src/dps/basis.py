"""B-spline bases on clamped uniform knots and difference penalties.

Evaluation is vectorised over points: for each point only the ``degree + 1``
nonzero basis values are computed (de Boor's triangular scheme) together with
the index of the knot span, and dense matrices are assembled from that local
form when needed.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

_clamp_reported = False


def _report_clamp(count: int) -> None:
    global _clamp_reported
    if not _clamp_reported:
        logger.warning("clamped %d basis argument(s) into the knot domain", count)
        _clamp_reported = True


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot sequence with ``degree + 1`` repeats at each end."""

    degree: int
    num_basis: int
    domain: tuple[float, float]
    knots: np.ndarray

    def __post_init__(self):
        a, b = self.domain
        t = np.asarray(self.knots, dtype=float)
        D, N = self.degree, self.num_basis
        if D < 0:
            raise ValueError("degree must be non-negative")
        if N < D + 1:
            raise ValueError(f"num_basis={N} must be at least degree+1={D + 1}")
        if not a < b:
            raise ValueError(f"degenerate domain [{a}, {b}]")
        if t.shape != (N + D + 1,):
            raise ValueError(f"expected {N + D + 1} knots, got {t.shape}")
        if np.any(np.diff(t) < 0):
            raise ValueError("knots must be non-decreasing")
        if np.any(t[: D + 1] != a) or np.any(t[N:] != b):
            raise ValueError("boundary knots must be repeated degree+1 times")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "knots", t)
        object.__setattr__(self, "domain", (float(a), float(b)))

    @functools.cached_property
    def reciprocals(self):
        return _reciprocals(self.knots, self.degree, self.num_basis)

    @functools.cached_property
    def inv_step(self) -> float:
        """Reciprocal interior spacing if breakpoints are equally spaced, else 0."""
        D, N = self.degree, self.num_basis
        br = self.knots[D : N + 1]
        h = np.diff(br)
        if np.all(h > 0) and np.allclose(h, h[0], rtol=1e-12, atol=0):
            return float(1.0 / h[0])
        return 0.0

    @property
    def interior(self) -> np.ndarray:
        return self.knots[self.degree + 1 : self.num_basis]

    def greville(self) -> np.ndarray:
        """Knot averages; a spline with these coefficients is the identity map."""
        D = self.degree
        if D == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        t = self.knots
        return np.array([t[k + 1 : k + D + 1].mean() for k in range(self.num_basis)])


def make_uniform_knots(num_basis: int, degree: int, domain=(0.0, 1.0)) -> KnotVector:
    """Clamped knots with equally spaced interior breakpoints."""
    a, b = float(domain[0]), float(domain[1])
    if num_basis < degree + 1:
        raise ValueError(f"num_basis={num_basis} must be at least degree+1={degree + 1}")
    if not a < b:
        raise ValueError(f"degenerate domain [{a}, {b}]")
    n_int = num_basis - degree - 1
    breaks = np.linspace(a, b, n_int + 2)
    knots = np.concatenate([np.full(degree, a), breaks, np.full(degree, b)])
    return KnotVector(degree, num_basis, (a, b), knots)


def _clamp(kv: KnotVector, x: np.ndarray) -> np.ndarray:
    a, b = kv.domain
    out = (x < a) | (x > b)
    if np.any(out):
        _report_clamp(int(out.sum()))
        x = np.clip(x, a, b)
    return x


def _reciprocals(t: np.ndarray, D: int, N: int):
    # Knot-difference reciprocals used by the recursion (0 where a difference vanishes).
    inv = np.zeros((N, D + 1, D + 1))
    dinv = np.zeros((N, D + 1, 2))
    for s in range(D, N):
        for j in range(1, D + 1):
            for r in range(j):
                den = t[s + r + 1] - t[s + 1 - j + r]
                inv[s, j, r] = 1.0 / den if den != 0 else 0.0
        for r in range(D + 1):
            k = s - D + r
            if D > 0 and r >= 1:
                den = t[k + D] - t[k]
                dinv[s, r, 0] = D / den if den != 0 else 0.0
            if D > 0 and r <= D - 1:
                den = t[k + D + 1] - t[k + 1]
                dinv[s, r, 1] = D / den if den != 0 else 0.0
    return inv, dinv


@njit(cache=True)
def _span(t, D, N, xi, inv_step):
    # largest s in [D, N-1] with t[s] <= xi; direct guess on uniform knots
    if inv_step > 0.0:
        s = D + int((xi - t[D]) * inv_step)
        if s > N - 1:
            s = N - 1
        if s < D:
            s = D
        while s > D and t[s] > xi:
            s -= 1
        while s < N - 1 and t[s + 1] <= xi:
            s += 1
        return s
    lo = D
    hi = N
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if t[mid] <= xi:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True, fastmath=True)
def _local_kernel(t, degree, num_basis, inv, dinv, inv_step, x, derivative):
    # de Boor's triangular recursion per point; column r holds B_{span-degree+r}.
    # The derivative uses B'_k = D/(t[k+D]-t[k]) B_{k,D-1} - D/(t[k+D+1]-t[k+1]) B_{k+1,D-1}.
    n = x.shape[0]
    D = degree
    span = np.empty(n, dtype=np.int64)
    vals = np.zeros((n, D + 1))
    dvals = np.zeros((n, D + 1))
    left = np.empty(D + 1)
    right = np.empty(D + 1)
    ndu = np.zeros(D + 1)
    low = np.zeros(D + 1)
    for i in range(n):
        xi = x[i]
        s = _span(t, D, num_basis, xi, inv_step)
        span[i] = s
        ndu[0] = 1.0
        for j in range(1, D + 1):
            left[j] = xi - t[s + 1 - j]
            right[j] = t[s + j] - xi
            saved = 0.0
            for r in range(j):
                temp = ndu[r] * inv[s, j, r]
                ndu[r] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            ndu[j] = saved
            if derivative and j == D - 1:
                for r in range(D):
                    low[r] = ndu[r]
        if derivative and D == 1:
            low[0] = 1.0
        for r in range(D + 1):
            vals[i, r] = ndu[r]
        if derivative and D > 0:
            for r in range(D + 1):
                acc = 0.0
                if r >= 1:
                    acc += low[r - 1] * dinv[s, r, 0]
                if r <= D - 1:
                    acc -= low[r] * dinv[s, r, 1]
                dvals[i, r] = acc
    return span, vals, dvals


@njit(cache=True, fastmath=True)
def _cubic_kernel(t, num_basis, inv, dinv, inv_step, x, derivative):
    # the same recursion unrolled for degree 3
    n = x.shape[0]
    span = np.empty(n, dtype=np.int64)
    vals = np.empty((n, 4))
    dvals = np.zeros((n, 4))
    for i in range(n):
        xi = x[i]
        s = _span(t, 3, num_basis, xi, inv_step)
        span[i] = s
        l1 = xi - t[s]
        l2 = xi - t[s - 1]
        l3 = xi - t[s - 2]
        r1 = t[s + 1] - xi
        r2 = t[s + 2] - xi
        r3 = t[s + 3] - xi
        tmp = inv[s, 1, 0]
        a0 = r1 * tmp
        a1 = l1 * tmp
        tmp = a0 * inv[s, 2, 0]
        b0 = r1 * tmp
        sv = l2 * tmp
        tmp = a1 * inv[s, 2, 1]
        b1 = sv + r2 * tmp
        b2 = l1 * tmp
        tmp = b0 * inv[s, 3, 0]
        vals[i, 0] = r1 * tmp
        sv = l3 * tmp
        tmp = b1 * inv[s, 3, 1]
        vals[i, 1] = sv + r2 * tmp
        sv = l2 * tmp
        tmp = b2 * inv[s, 3, 2]
        vals[i, 2] = sv + r3 * tmp
        vals[i, 3] = l1 * tmp
        if derivative:
            dvals[i, 0] = -b0 * dinv[s, 0, 1]
            dvals[i, 1] = b0 * dinv[s, 1, 0] - b1 * dinv[s, 1, 1]
            dvals[i, 2] = b1 * dinv[s, 2, 0] - b2 * dinv[s, 2, 1]
            dvals[i, 3] = b2 * dinv[s, 3, 0]
    return span, vals, dvals


def local_basis(kv: KnotVector, x, derivative: bool = False):
    """Nonzero basis values at each point.

    Returns
    -------
    span : (n,) int array
        Basis ``span - D + r`` corresponds to column ``r`` of ``values``.
    values : (n, D+1) array
    dvalues : (n, D+1) array, only if ``derivative`` is true
    """
    x = _clamp(kv, np.atleast_1d(np.asarray(x, dtype=float)).ravel())
    inv, dinv = kv.reciprocals
    if kv.degree == 3:
        span, vals, dvals = _cubic_kernel(kv.knots, kv.num_basis, inv, dinv, kv.inv_step, x, derivative)
    else:
        span, vals, dvals = _local_kernel(kv.knots, kv.degree, kv.num_basis, inv, dinv, kv.inv_step, x, derivative)
    if not derivative:
        return span, vals
    return span, vals, dvals


def _scatter(kv: KnotVector, span: np.ndarray, vals: np.ndarray) -> np.ndarray:
    n = span.shape[0]
    D = kv.degree
    out = np.zeros((n, kv.num_basis))
    cols = span[:, None] - D + np.arange(D + 1)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out


def eval_basis(kv: KnotVector, x: float) -> np.ndarray:
    """All ``N`` basis values at a single point."""
    span, vals = local_basis(kv, [x])
    return _scatter(kv, span, vals)[0]


def eval_basis_matrix(kv: KnotVector, xs) -> np.ndarray:
    """Design matrix with row ``i`` equal to ``eval_basis(kv, xs[i])``."""
    span, vals = local_basis(kv, xs)
    return _scatter(kv, span, vals)


def eval_basis_derivative(kv: KnotVector, x: float) -> np.ndarray:
    """First derivatives of all basis functions at ``x`` (zeros for degree 0)."""
    span, _, dvals = local_basis(kv, [x], derivative=True)
    return _scatter(kv, span, dvals)[0]


def eval_basis_derivative_matrix(kv: KnotVector, xs) -> np.ndarray:
    span, _, dvals = local_basis(kv, xs, derivative=True)
    return _scatter(kv, span, dvals)


@dataclass(frozen=True)
class DifferenceOp:
    num_basis: int
    order: int
    matrix: np.ndarray
    penalty: np.ndarray


def difference_op(num_basis: int, order: int) -> DifferenceOp:
    """Order-``r`` difference matrix (rows like ``(-1, 2, -1)``) and its Gram matrix."""
    if not 1 <= order <= num_basis - 1:
        raise ValueError(f"order must lie in [1, {num_basis - 1}], got {order}")
    Dm = np.eye(num_basis)
    for _ in range(order):
        Dm = Dm[1:] - Dm[:-1]
    # np.diff convention gives (1,-2,1) for r=2; flip to the (-1,2,-1) sign convention
    # for even orders so that both displayed forms start with -1.
    if order % 2 == 0:
        Dm = 0.0 - Dm
    Dm.setflags(write=False)
    P = Dm.T @ Dm
    P.setflags(write=False)
    return DifferenceOp(num_basis, order, Dm, P)
