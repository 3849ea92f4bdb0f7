"""Closed-form ECM tuning of the layer-wise penalties.

Each spline neuron's coefficient row is treated as a Gaussian random effect
with precision proportional to the difference penalty, ``w ~ N(0, xi2 S~^-1)``
(``S~`` is the penalty plus a tiny ridge that makes the prior proper), and
responses as ``y = B w + e`` with ``e ~ N(0, sigma2 I)``.  The E-step is a
penalised least-squares solve, the CM-steps update ``xi2`` and ``sigma2`` in
closed form, and their ratio is the penalty.  The module exposes these
primitives for a single design ``B``.

Inside a network, a layer is linearised around its current activations
``h``: with ``J_i`` the Jacobian of the output at sample ``i`` with respect
to the layer's activations and ``r_i`` the residual, the working response
``z_i = r_i + J_i . h_i`` follows ``z_i = sum_j J_ij F_i w_j + e_i``, where
``F`` holds the layer's summed basis features.  All neurons of the layer
enter one stacked design; the marginal likelihood of the data under that
design gives the layer's ``sigma2``, ``xi2`` and penalty.  Whitening by the
Cholesky factor of ``S~`` and one eigendecomposition per cycle make every
E- and CM-step linear in the number of coefficients.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .data import Dataset
from .model import DpsModel, forward
from .train import TrainOptions, backprop, fit, one_hot, output_grad, penalized_loss

logger = logging.getLogger(__name__)

PRIOR_RIDGE = 1e-8
LAMBDA_CAP = 1e12
LAMBDA_FLOOR = 1e-12
# Rank tolerance for the first-layer proposal inside ecm_tune: directions at the
# rounding level must not be fitted.
OLS_RANK_TOL = 1e-9


class RankDeficiencyWarning(UserWarning):
    pass


class EcmError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


def proper_penalty(S: np.ndarray, eps: float = PRIOR_RIDGE) -> np.ndarray:
    return S + eps * np.eye(S.shape[0])


def _min_norm_lstsq(A: np.ndarray, Y: np.ndarray, cond: float | None = None) -> np.ndarray:
    # pivoted-QR least squares; columns below the relative rank tolerance (default
    # n * eps) are dropped and the minimum-norm solution returned
    cond = max(A.shape) * np.finfo(float).eps if cond is None else cond
    coef, _, rank, _ = linalg.lstsq(A, Y, cond=cond, lapack_driver="gelsy")
    if rank < A.shape[1]:
        warnings.warn(
            f"design has rank {rank} < {A.shape[1]} columns; using the minimum-norm solution",
            RankDeficiencyWarning,
            stacklevel=3,
        )
    return coef


def first_layer_ols(X, Y1, intercept: bool = True, weights=None, cond: float | None = None) -> np.ndarray:
    """Least-squares weights of each first-layer neuron on the inputs.

    Returns a ``p1 x (d+1)`` matrix whose first column is the intercept
    (``p1 x d`` when ``intercept`` is false).  Optional per-sample
    ``weights`` give weighted least squares.
    """
    X = np.asarray(X, dtype=float)
    Y1 = np.asarray(Y1, dtype=float)
    if Y1.ndim == 1:
        Y1 = Y1[:, None]
    A = np.column_stack([np.ones(X.shape[0]), X]) if intercept else X
    if weights is not None:
        r = np.sqrt(np.asarray(weights, dtype=float))[:, None]
        A, Y1 = A * r, Y1 * r
    return _min_norm_lstsq(A, Y1, cond).T


def last_layer_fit(H, y, cond: float | None = None) -> np.ndarray:
    """Multivariate-response least squares ``(H'H)^-1 H'y``.

    ``H`` is ``n x q`` with one column per neuron (intercept column included
    by the caller).  Returns ``p_L x q``.
    """
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    return _min_norm_lstsq(H, y, cond).T


def posterior_moments(B, y, sigma2: float, xi2: float, S, eps: float = PRIOR_RIDGE):
    """Conditional mean and covariance of the random coefficients.

    ``y`` may hold one column per neuron sharing the design ``B``; the
    covariance is then common to all of them.  Returns ``(mu, gamma)`` with
    ``mu`` shaped like ``B.T @ y``.
    """
    if not (sigma2 > 0 and xi2 > 0):
        raise ValueError("sigma2 and xi2 must be positive")
    B = np.asarray(B, dtype=float)
    St = proper_penalty(np.asarray(S, dtype=float), eps)
    lam = sigma2 / xi2
    A = B.T @ B + lam * St
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise EcmError(f"penalised normal equations are not positive definite: {exc}") from None
    mu = linalg.cho_solve(c, B.T @ np.asarray(y, dtype=float))
    Ainv = linalg.cho_solve(c, np.eye(A.shape[0]))
    gamma = sigma2 * 0.5 * (Ainv + Ainv.T)
    return mu, gamma


def _rows(mu) -> np.ndarray:
    # coefficient vectors as rows (p x N)
    mu = np.asarray(mu, dtype=float)
    return mu[None, :] if mu.ndim == 1 else mu.T


def update_xi2(mu, gamma, S_tilde) -> float:
    """``(1/(p N)) sum_j [tr(S~ Gamma_j) + mu_j' S~ mu_j]`` over the layer's neurons.

    ``mu`` is an N-vector or ``N x p`` (one column per neuron); ``gamma`` an
    ``N x N`` matrix shared by all neurons or a ``p x N x N`` stack.
    """
    M = _rows(mu)
    p, N = M.shape
    S_tilde = np.asarray(S_tilde, dtype=float)
    G = np.asarray(gamma, dtype=float)
    tr = np.sum(S_tilde * G) * p if G.ndim == 2 else float(np.einsum("ij,pji->", S_tilde, G))
    quad = float(np.einsum("pi,ij,pj->", M, S_tilde, M))
    return (tr + quad) / (p * N)


def update_sigma2(B, Y, mu, gamma) -> float:
    """``(1/(n p)) sum_j [||y_j - B mu_j||^2 + tr(B Gamma_j B')]``."""
    B = np.asarray(B, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    M = _rows(mu)
    n, p = Y.shape
    resid = Y - B @ M.T
    G = np.asarray(gamma, dtype=float)
    if G.ndim == 2:
        tr = p * float(np.sum((B @ G) * B))
    else:
        tr = float(sum(np.sum((B @ g) * B) for g in G))
    return (float(np.sum(resid**2)) + tr) / (n * p)


def update_lambda(sigma2: float, xi2: float) -> float:
    if xi2 <= 0:
        warnings.warn("random-effect variance collapsed to zero; capping the penalty", RuntimeWarning, stacklevel=2)
        return LAMBDA_CAP
    return sigma2 / xi2


def layer_log_likelihood(B, Y, sigma2: float, xi2: float, S, eps: float = PRIOR_RIDGE) -> float:
    """Marginal Gaussian log-likelihood of the layer's pseudo-responses.

    Each column of ``Y`` is ``N(0, sigma2 I + xi2 B S~^-1 B')``, evaluated
    through the determinant lemma and Woodbury identity.
    """
    B = np.asarray(B, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, p = Y.shape
    N = B.shape[1]
    St = proper_penalty(np.asarray(S, dtype=float), eps)
    M = St / xi2 + B.T @ B / sigma2
    cM = linalg.cho_factor(M, lower=True)
    cS = linalg.cho_factor(St, lower=True)
    logdet_M = 2.0 * np.sum(np.log(np.diag(cM[0])))
    logdet_S = 2.0 * np.sum(np.log(np.diag(cS[0])))
    logdet = n * np.log(sigma2) + N * np.log(xi2) - logdet_S + logdet_M
    BtY = B.T @ Y
    quad = np.sum(Y**2) / sigma2 - np.sum(BtY * linalg.cho_solve(cM, BtY)) / sigma2**2
    return float(-0.5 * (p * (n * np.log(2 * np.pi) + logdet) + quad))


@dataclass
class LayerState:
    sigma2: float
    xi2: float

    @property
    def lam(self) -> float:
        return self.sigma2 / self.xi2


@dataclass
class EcmState:
    layers: list[LayerState]
    converged: bool = False

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.layers])


@dataclass
class CycleRecord:
    cycle: int
    lambdas: np.ndarray
    model_lambdas: np.ndarray
    sigma2: np.ndarray
    xi2: np.ndarray
    log_likelihood: np.ndarray
    objective: float
    accepted: tuple[bool, ...]  # spline layers, then the first layer
    cm_checks: list[tuple[float, float]] = field(default_factory=list)
    inner_iterations: int = 0
    seconds: float = 0.0


@dataclass(frozen=True)
class EcmOptions:
    max_cycles: int = 50
    tol: float = 1e-4
    inner_iters: int = 1  # E/CM passes per layer and cycle; the linearisation moves in between
    inner_tol: float = 1e-10
    refine_epochs: int = 50
    train: TrainOptions = field(default_factory=lambda: TrainOptions(max_epochs=50))
    target_floor: float = 1e-2  # per-sample Jacobian norm floor (first layer), relative to the median
    record_checks: bool = False  # log-likelihood around every CM update
    max_lambda_step: float = 10.0  # largest factor by which a penalty may move in one cycle


def em_layer(B, T, S, sigma2: float, xi2: float, iters: int = 200, tol: float = 1e-10, checks=None):
    """Multicycle ECM for one design ``B`` and responses ``T`` (n x p).

    Every CM update is preceded by a fresh E-step.  When ``checks`` is a
    list, the marginal log-likelihood before and after each CM update is
    appended to it.  Returns ``(sigma2, xi2, iterations)``.
    """
    St = proper_penalty(S)
    lam_old = sigma2 / xi2
    it = 0
    for it in range(1, iters + 1):
        before = layer_log_likelihood(B, T, sigma2, xi2, S) if checks is not None else None
        mu, gamma = posterior_moments(B, T, sigma2, xi2, S)
        xi2 = max(update_xi2(mu, gamma, St), 1e-300)
        if checks is not None:
            mid = layer_log_likelihood(B, T, sigma2, xi2, S)
            checks.append((before, mid))
        mu, gamma = posterior_moments(B, T, sigma2, xi2, S)
        sigma2 = max(update_sigma2(B, T, mu, gamma), 1e-300)
        if checks is not None:
            checks.append((mid, layer_log_likelihood(B, T, sigma2, xi2, S)))
        lam = update_lambda(sigma2, xi2)
        if lam >= LAMBDA_CAP:
            xi2 = sigma2 / LAMBDA_CAP
            break
        if abs(lam - lam_old) <= tol * lam_old:
            break
        lam_old = lam
    return sigma2, xi2, it


@dataclass
class StackedLayer:
    """Linearised random-effect model of one spline layer.

    Coefficients are split along the penalty's eigenvectors into penalised
    coordinates (whitened so their prior is ``N(0, xi2 I)``) and null-space
    coordinates, whose prior variance ``xi2 / eps`` makes them fixed effects
    up to O(eps).  The null-space design is projected out of the data (its
    rank is ``r0``); ``theta``/``c`` are the eigenvalues of the projected
    penalised Gram matrix and the projected right-hand side in its eigenbasis.
    """

    theta: np.ndarray
    c: np.ndarray
    n_flat: int  # penalised directions with zero eigenvalue (omitted from theta)
    zz: float  # squared norm of the projected working response
    n_obs: int
    q: int  # coefficients in the layer (p * N)
    r0: int  # identified null-space directions
    V: np.ndarray
    pen_basis: np.ndarray  # N x (N - r): penalised coordinates -> coefficients
    null_basis: np.ndarray  # N x r
    p: int
    N: int
    _Zp: np.ndarray
    _Z0: np.ndarray
    _z: np.ndarray

    @property
    def n_free(self) -> int:
        # null-space directions the data do not reach keep their prior
        return self.p * self.null_basis.shape[1] - self.r0

    def moments(self, sigma2: float, xi2: float):
        """Sums over the layer's neurons needed by the CM updates.

        Returns ``(tr_S_gamma, mu_S_mu, resid_sq, tr_Z_gamma_Z)``: the trace
        of ``S~ Gamma_j`` and ``mu_j' S~ mu_j`` summed over neurons, the
        expected squared residual's two parts ``||z - Z mu||^2`` and
        ``tr(Z Gamma Z')``.
        """
        lam = sigma2 / xi2
        d = self.theta + lam
        c2 = self.c**2
        tr_s = sigma2 * float(np.sum(1.0 / d)) + (self.n_free + self.n_flat) * xi2
        quad = float(np.sum(c2 / d**2))
        resid = self.zz - 2.0 * float(np.sum(c2 / d)) + float(np.sum(c2 * self.theta / d**2))
        tr_z = sigma2 * (float(np.sum(self.theta / d)) + self.r0)
        return tr_s, quad, max(resid, 0.0), tr_z

    def log_likelihood(self, sigma2: float, xi2: float) -> float:
        """Marginal log-likelihood of the working response, up to a constant in ``eps``."""
        m = self.n_obs - self.r0
        r = xi2 / sigma2
        logdet = self.r0 * np.log(xi2) + m * np.log(sigma2) + float(np.sum(np.log1p(self.theta * r)))
        quad = self.zz / sigma2 - float(np.sum(self.c**2 * r / (sigma2 * (1.0 + self.theta * r))))
        return -0.5 * (m * np.log(2 * np.pi) + logdet + quad)

    def posterior_mean(self, sigma2: float, xi2: float) -> np.ndarray:
        """Coefficient rows (p x N) at the posterior mean."""
        a = self.V @ (self.c / (self.theta + sigma2 / xi2))
        b = _min_norm_solve(self._Z0, self._z - self._Zp @ a)
        k = self.pen_basis.shape[1]
        return a.reshape(self.p, k) @ self.pen_basis.T + b.reshape(self.p, -1) @ self.null_basis.T


def _min_norm_solve(A, y):
    if A.shape[1] == 0:
        return np.zeros(0)
    cond = max(A.shape) * np.finfo(float).eps
    return linalg.lstsq(A, y, cond=cond)[0]


def penalty_bases(S, tol: float = 1e-10):
    """Eigen-split of a difference penalty: ``(pen_basis, null_basis)``.

    ``pen_basis`` columns are eigenvectors scaled by ``s^-1/2`` so that
    ``pen_basis' S pen_basis = I``; ``null_basis`` spans the null space.
    """
    s, U = linalg.eigh(np.asarray(S, dtype=float))
    null = s <= tol * s[-1]
    return U[:, ~null] / np.sqrt(s[~null]), U[:, null]


def stacked_layer(F, J, z, v, S, method: str = "auto") -> StackedLayer:
    """Build the layer model.

    ``F``: n x N summed basis features; ``J``: n x C x p output Jacobians;
    ``z``: n x C working responses; ``v``: n x C observation weights.
    Observations are stacked over samples and outputs with rows
    ``sqrt(v) * kron(J, F)``.  ``method`` picks the eigendecomposition of the
    coefficient-side Gram matrix ("primal"), of the observation-side one
    ("dual"), or the smaller of the two ("auto").
    """
    F = np.asarray(F, dtype=float)
    n, N = F.shape
    _, C, p = J.shape
    pen, nul = penalty_bases(S)
    Fp, F0 = F @ pen, F @ nul
    sv = np.sqrt(v)
    Jw = J * sv[:, :, None]  # n x C x p
    Zp = (Jw[:, :, :, None] * Fp[:, None, None, :]).reshape(n * C, -1)
    Z0 = (Jw[:, :, :, None] * F0[:, None, None, :]).reshape(n * C, -1)
    zw = (z * sv).reshape(-1)
    if Z0.shape[1]:
        U0, s0, _ = linalg.svd(Z0, full_matrices=False)
        r0 = int(np.sum(s0 > max(Z0.shape) * np.finfo(float).eps * s0[0])) if s0.size and s0[0] > 0 else 0
        Q0 = U0[:, :r0]
        zp = zw - Q0 @ (Q0.T @ zw)
        Zpp = Zp - Q0 @ (Q0.T @ Zp)
    else:
        r0, zp, Zpp = 0, zw, Zp
    m, k = Zpp.shape
    if method not in ("auto", "primal", "dual"):
        raise ValueError(f"unknown method {method!r}")
    dual = m < k if method == "auto" else method == "dual"
    if dual:
        # fewer observations than coefficients: the nonzero spectrum of the
        # Gram matrix comes from the smaller outer-product matrix
        theta, U = linalg.eigh(Zpp @ Zpp.T)
    else:
        theta, V = linalg.eigh(Zpp.T @ Zpp)
    keep = theta > min(m, k) * np.finfo(float).eps * max(theta[-1], 0.0)
    theta = theta[keep]
    if dual:
        V = (Zpp.T @ U[:, keep]) / np.sqrt(theta)
    else:
        V = V[:, keep]
    c = V.T @ (Zpp.T @ zp)
    return StackedLayer(theta, c, k - theta.size, float(zp @ zp), n * C, p * N, r0, V, pen, nul, p, N, Zp, Z0, zw)


def em_stacked(layer: StackedLayer, sigma2: float, xi2: float, iters: int = 500, tol: float = 1e-10, checks=None):
    """Multicycle ECM (E, CM for xi2, E, CM for sigma2) on a stacked layer."""
    lam_old = sigma2 / xi2
    it = 0
    for it in range(1, iters + 1):
        before = layer.log_likelihood(sigma2, xi2) if checks is not None else None
        tr_s, quad, _, _ = layer.moments(sigma2, xi2)
        xi2 = max((tr_s + quad) / layer.q, 1e-300)
        if checks is not None:
            mid = layer.log_likelihood(sigma2, xi2)
            checks.append((before, mid))
        _, _, resid, tr_z = layer.moments(sigma2, xi2)
        sigma2 = max((resid + tr_z) / layer.n_obs, 1e-300)
        if checks is not None:
            checks.append((mid, layer.log_likelihood(sigma2, xi2)))
        lam = update_lambda(sigma2, xi2)
        if not LAMBDA_FLOOR < lam < LAMBDA_CAP:
            xi2 = sigma2 / float(np.clip(lam, LAMBDA_FLOOR, LAMBDA_CAP))
            break
        if abs(lam - lam_old) <= tol * lam_old:
            break
        lam_old = lam
    return sigma2, xi2, it


def _loss_scale(model: DpsModel) -> float:
    # squared loss is sum r^2; cross-entropy is locally half a weighted sum of squares
    return 0.5 if model.spec.output_kind == "softmax" else 1.0


def output_jacobians(model: DpsModel, cache) -> list[np.ndarray]:
    """Per hidden layer, ``n x C x p`` derivatives of each output (logit) w.r.t. the activations."""
    n_out = model.spec.neurons[-1]
    n = cache.hidden[0].shape[0]
    jac = [np.zeros((n, n_out, h.shape[1])) for h in cache.hidden]
    for c in range(n_out):
        e = np.zeros((n, n_out))
        e[:, c] = 1.0
        for ell, g in enumerate(backprop(model, cache, e)[1]):
            jac[ell][:, c, :] = g
    return jac


def working_response(model: DpsModel, cache, y, J: np.ndarray, h: np.ndarray):
    """Working response ``z`` and weights ``v`` (both n x C) for one layer."""
    lin = np.einsum("icp,ip->ic", J, h)
    if model.spec.output_kind == "softmax":
        P = cache.output
        v = np.maximum(P * (1.0 - P), 1e-6)
        return lin + (one_hot(y, P.shape[1]) - P) / v, v
    r = np.asarray(y, dtype=float) - cache.output
    return lin + r[:, None], np.ones_like(lin)


def layer_targets(model: DpsModel, cache, y, floor: float = 1e-2, jacobians=None):
    """Pseudo-responses and sample weights for every hidden layer.

    For sample ``i`` and layer activations ``h_i`` the pseudo-response is
    ``h_i - g_i / (2 ||J_i||^2)``, where ``g_i`` is the gradient of the data
    loss with respect to ``h_i`` and ``J_i`` the output Jacobian; for a
    squared loss this is the minimum-norm activation change removing the
    residual under linearisation.  The weight ``||J_i||^2`` (floored at
    ``floor`` times its median) turns least squares on the pseudo-responses
    into a Gauss-Newton step.  Returns a list (layer 1 first) of
    ``(targets, weights)``.
    """
    kind = "cross_entropy" if model.spec.output_kind == "softmax" else "squared"
    g_loss = backprop(model, cache, output_grad(model, cache, y, kind))[1]
    jacobians = jacobians if jacobians is not None else output_jacobians(model, cache)
    out = []
    for h, g, J in zip(cache.hidden, g_loss, jacobians):
        j2 = np.sum(J**2, axis=(1, 2))
        med = float(np.median(j2))
        wts = np.maximum(j2, floor * med) if med > 0 else np.ones_like(j2)
        out.append((h - 0.5 * g / wts[:, None], wts))
    return out


def _try(current: DpsModel, proposal: DpsModel, data: Dataset, halvings: int = 8):
    # Move toward a closed-form block update, halving the step until the
    # penalised objective does not increase; keep the current weights otherwise.
    try:
        base = penalized_loss(current, data)
    except ValueError:
        return proposal, True
    step = 1.0
    start, target = current.params(), proposal.params()
    for _ in range(halvings + 1):
        trial = proposal if step == 1.0 else current.with_params([a + step * (b - a) for a, b in zip(start, target)])
        try:
            if penalized_loss(trial, data) <= base:
                return trial, True
        except ValueError:
            pass
        step *= 0.5
    return current, False


def _rebalance(model: DpsModel) -> tuple[DpsModel, float]:
    # The output c + sum_j w_j F omega_j is unchanged by (w / a, omega * a); fixing
    # the output weights at unit norm (and the penalty at lambda / a^2, which keeps
    # the objective value) stops gradient steps from drifting along that direction.
    if model.spec.num_spline_layers == 0:
        return model, 1.0
    WL = model.last_layer_weights.copy()
    a = float(np.linalg.norm(WL[:, 1:]))
    if not np.isfinite(a) or a == 0:
        return model, 1.0
    WL[:, 1:] /= a
    sw = [w.copy() for w in model.spline_weights]
    sw[-1] = sw[-1] * a
    lams = model.lambdas.copy()
    lams[-1] /= a * a
    return model.with_params([model.first_layer_weights.copy(), *sw, WL]).with_lambdas(lams), a


def init_state(model: DpsModel, data: Dataset) -> EcmState:
    """Starting variances: residual variance and the model's current penalties."""
    out, _ = forward(model, data.features)
    if model.spec.output_kind == "softmax":
        sigma2 = 1.0
    else:
        sigma2 = max(float(np.mean((data.response - out) ** 2)), 1e-12)
    scale = _loss_scale(model)
    layers = []
    for lam in model.lambdas:
        lam_local = max(float(lam) / scale, 1e-8)
        layers.append(LayerState(sigma2, sigma2 / lam_local))
    return EcmState(layers)


def ecm_tune(model: DpsModel, data: Dataset, max_cycles: int = 50, tol: float = 1e-4, options: EcmOptions | None = None, state: EcmState | None = None):
    """Alternate closed-form layer updates with short gradient refinements.

    One cycle, for each spline layer in turn: linearise at the current
    weights, run the multicycle ECM for ``(sigma2, xi2)`` on the stacked
    layer model, set the penalty to ``sigma2 / xi2`` and the coefficient
    rows to their posterior means.  Then a Gauss-Newton least-squares step
    for the first layer.  (The output weights are left to the refinement: the
    last spline layer's posterior mean already fixes the fitted output, and
    refitting them by least squares on its nearly collinear neurons only
    inflates their scale.)  Each closed-form block update is kept only if (after step halving) it does
    not increase the penalised objective.  A short :func:`fit` at the new
    penalties ends the cycle.  Stops when every layer's penalty changes by
    less than ``tol`` relative between cycles.

    Returns ``(model, state, trajectory)`` with one :class:`CycleRecord` per
    cycle; ``state.converged`` tells whether the tolerance was met.
    """
    opts = options or EcmOptions(max_cycles=max_cycles, tol=tol)
    if model.spec.num_spline_layers == 0:
        raise ValueError("ecm_tune needs at least one spline layer")
    if opts.max_cycles < 1:
        raise ValueError("max_cycles must be >= 1")
    y = data.response
    scale = _loss_scale(model)
    current = model.copy()
    state = state if state is not None else init_state(current, data)
    state.converged = False
    trajectory: list[CycleRecord] = []
    prev = None
    for cycle in range(opts.max_cycles):
        t0 = time.perf_counter()
        lls = []
        checks: list[tuple[float, float]] = []
        inner = 0
        accepted = []
        for s, (op, ls) in enumerate(zip(current.penalty_ops(), state.layers)):
            _, cache = forward(current, data.features, need_derivs=True)
            J = output_jacobians(current, cache)[s + 1]
            z, v = working_response(current, cache, y, J, cache.hidden[s + 1])
            layer = stacked_layer(cache.features[s], J, z, v, op.penalty)
            sigma2, xi2, it = em_stacked(layer, ls.sigma2, ls.xi2, opts.inner_iters, opts.inner_tol, checks if opts.record_checks else None)
            inner += it
            lam_prev = ls.lam
            lam_new = float(np.clip(sigma2 / xi2, lam_prev / opts.max_lambda_step, lam_prev * opts.max_lambda_step))
            ls.sigma2, ls.xi2 = sigma2, sigma2 / lam_new
            lls.append(layer.log_likelihood(sigma2, xi2))
            lams = current.lambdas.copy()
            lams[s] = min(ls.lam * scale, LAMBDA_CAP)
            current = current.with_lambdas(lams)
            sw = [w.copy() for w in current.spline_weights]
            sw[s] = layer.posterior_mean(sigma2, xi2)
            current, ok = _try(current, current.with_params([current.first_layer_weights, *sw, current.last_layer_weights]), data)
            accepted.append(ok)
        _, cache = forward(current, data.features, need_derivs=True)
        T1, w1 = layer_targets(current, cache, y, opts.target_floor)[0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiencyWarning)
            W1 = first_layer_ols(cache.inputs, T1, weights=w1, cond=OLS_RANK_TOL)
            current, ok = _try(current, current.with_params([W1, *current.params()[1:]]), data)
            accepted.append(ok)
        if opts.refine_epochs > 0:
            current, _ = fit(current, data, replace(opts.train, max_epochs=opts.refine_epochs))
        current, a = _rebalance(current)
        logger.debug("rebalance factor %g", a)
        state.layers[-1].xi2 *= a * a  # the variance ratio follows the rescaled penalty
        lam = state.lambdas
        trajectory.append(
            CycleRecord(
                cycle=cycle,
                lambdas=lam.copy(),
                model_lambdas=current.lambdas.copy(),
                sigma2=np.array([s.sigma2 for s in state.layers]),
                xi2=np.array([s.xi2 for s in state.layers]),
                log_likelihood=np.array(lls),
                objective=penalized_loss(current, data),
                accepted=tuple(accepted),
                cm_checks=checks,
                inner_iterations=inner,
                seconds=time.perf_counter() - t0,
            )
        )
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise EcmError(f"penalty left the positive reals at cycle {cycle}", trajectory)
        if prev is not None and np.max(np.abs(lam - prev) / prev) < opts.tol:
            state.converged = True
            break
        prev = lam
    else:
        logger.info("ecm_tune stopped at max_cycles=%d without meeting tol=%g", opts.max_cycles, opts.tol)
    return current, state, trajectory
