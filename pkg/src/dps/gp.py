"""Gaussian-process output head, lifetime survival model and delta-method bands."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import cdist, pdist

logger = logging.getLogger(__name__)

GRID_SIZE = 20
NUGGET_FRACTION = 1e-6
MAX_NUGGET_FRACTION = 1e-2


class GpError(RuntimeError):
    pass


@dataclass(frozen=True)
class LifetimeInputs:
    """Process constants and stress conditions of the oxide-breakdown lifetime model."""

    A_FEOL: float
    a: float
    b: float
    c: float
    d: float
    V: float
    T: float
    W: float
    L: float
    s: float
    beta: float
    t: np.ndarray | None = None

    def __post_init__(self):
        for name in ("A_FEOL", "V", "T", "W", "L", "s", "beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.s > 1:
            raise ValueError(f"s must lie in (0, 1], got {self.s}")


def lifetime_eta(inp: LifetimeInputs) -> float:
    """Characteristic lifetime ``eta`` (the 63.2% failure time)."""
    b = inp.beta
    return float(
        inp.A_FEOL
        * (inp.W * inp.L) ** (-1.0 / b)
        * np.exp(-1.0 / b)
        * inp.V ** (inp.a + inp.b * inp.T)
        * np.exp((inp.c * inp.T + inp.d) / inp.T**2)
        / inp.s
    )


def survival(t, eta: float, beta: float):
    """Weibull survival ``exp(-(t/eta)^beta)``."""
    if not (eta > 0 and beta > 0):
        raise ValueError("eta and beta must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("times must be non-negative")
    return np.exp(-((t / eta) ** beta))


def se_kernel(A, B, lengthscale: float, signal_var: float) -> np.ndarray:
    return signal_var * np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * lengthscale**2))


@dataclass(frozen=True)
class GpPosterior:
    lengthscale: float
    signal_var: float
    nugget: float
    Z: np.ndarray
    factor: np.ndarray  # lower Cholesky factor of K + nugget I
    alpha: np.ndarray
    mean: float  # constant mean removed before fitting
    log_marginal: float


def _chol(K):
    try:
        return linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return None


def _log_marginal(Lf, yc) -> tuple[float, np.ndarray]:
    alpha = linalg.cho_solve((Lf, True), yc)
    ll = -0.5 * float(yc @ alpha) - float(np.sum(np.log(np.diag(Lf)))) - 0.5 * yc.size * np.log(2 * np.pi)
    return ll, alpha


def fit_gp_head(Z, y, grid_size: int = GRID_SIZE) -> GpPosterior:
    """Squared-exponential GP on features ``Z`` with grid-searched hyperparameters.

    The response is centred at its mean.  Lengthscales span 1e-2 to 1e2 times
    the median pairwise distance and signal variances 1e-2 to 1e4 times the
    response variance, both on log grids.  The nugget starts at
    ``1e-6 * var(y)`` and is raised tenfold (up to ``1e-2 * var(y)``) while a
    Cholesky factorisation fails.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != y.size:
        raise ValueError("Z and y have different numbers of rows")
    if y.size < 3:
        raise ValueError("at least 3 observations are required")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite features or responses")
    mu = float(y.mean())
    yc = y - mu
    scale = float(yc.var()) or 1.0
    dists = pdist(Z)
    dists = dists[dists > 0]
    med = float(np.median(dists)) if dists.size else 1.0
    lengths = med * np.geomspace(1e-2, 1e2, grid_size)
    variances = scale * np.geomspace(1e-2, 1e4, grid_size)
    sq = cdist(Z, Z, "sqeuclidean")
    nugget = NUGGET_FRACTION * scale
    while True:
        best = None
        failed = False
        for ell in lengths:
            R = np.exp(-sq / (2.0 * ell**2))
            for sv in variances:
                Lf = _chol(sv * R + nugget * np.eye(y.size))
                if Lf is None:
                    failed = True
                    break
                ll, alpha = _log_marginal(Lf, yc)
                if best is None or ll > best[0]:
                    best = (ll, float(ell), float(sv), Lf, alpha)
            if failed:
                break
        if not failed:
            break
        nugget *= 10.0
        if nugget > MAX_NUGGET_FRACTION * scale * (1 + 1e-9):
            raise GpError("kernel matrix not positive definite at the largest nugget")
        logger.info("raising GP nugget to %g", nugget)
    ll, ell, sv, Lf, alpha = best
    return GpPosterior(ell, sv, nugget, Z.copy(), Lf, alpha, mu, ll)


def gp_predict(gp: GpPosterior, Zs) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance (the nugget included) at ``Zs``."""
    Zs = np.asarray(Zs, dtype=float)
    if Zs.ndim == 1:
        Zs = Zs[:, None]
    if Zs.shape[1] != gp.Z.shape[1]:
        raise ValueError(f"features have {Zs.shape[1]} columns, the GP expects {gp.Z.shape[1]}")
    Ks = se_kernel(gp.Z, Zs, gp.lengthscale, gp.signal_var)
    mean = gp.mean + Ks.T @ gp.alpha
    v = linalg.solve_triangular(gp.factor, Ks, lower=True)
    var = gp.signal_var + gp.nugget - np.sum(v**2, axis=0)
    var[(var < 0) & (var > -1e-12 * (gp.signal_var + gp.nugget))] = 0.0
    return mean, np.maximum(var, 0.0)


def delta_band(eta_hat: float, eta_var: float, beta: float, t_grid, level: float = 0.95):
    """Pointwise band for the survival curve from the variance of ``eta``.

    Returns ``(S, lower, upper)``; ``dS/deta = S beta t^beta eta^(-beta-1)``.
    """
    if eta_var < 0:
        raise ValueError("eta_var must be non-negative")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    t = np.asarray(t_grid, dtype=float)
    S = survival(t, eta_hat, beta)
    grad = S * beta * t**beta * eta_hat ** (-beta - 1.0)
    sd = np.abs(grad) * np.sqrt(eta_var)
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    return S, np.clip(S - z * sd, 0.0, 1.0), np.clip(S + z * sd, 0.0, 1.0)


def save_band(path, t, S, lower, upper) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "S", "lower", "upper"])
        for row in zip(t, S, lower, upper):
            w.writerow([format(float(v), ".17g") for v in row])
