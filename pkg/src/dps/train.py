"""Penalised objective, its analytic gradient, and full-batch descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import Dataset
from .model import DpsModel, ForwardCache, forward

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainOptions:
    learning_rate: float = 1e-2
    max_epochs: int = 5000
    rel_tol: float = 1e-8
    momentum: float = 0.9
    loss_kind: str | None = None  # "squared" | "cross_entropy"; None follows the output head
    growth: float = 1.1
    min_learning_rate: float = 1e-14

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.loss_kind not in (None, "squared", "cross_entropy"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")


def _loss_kind(model, loss_kind):
    if loss_kind is not None:
        return loss_kind
    return "cross_entropy" if model.spec.output_kind == "softmax" else "squared"


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    Y = np.zeros((labels.shape[0], num_classes))
    Y[np.arange(labels.shape[0]), labels] = 1.0
    return Y


def _check(model: DpsModel, data: Dataset):
    if data.d != model.spec.input_dim:
        raise ValueError(f"data has {data.d} features, model expects {model.spec.input_dim}")
    lam = np.asarray(model.lambdas)
    if np.any(lam < 0):
        raise ValueError("negative penalty parameter")


def data_loss(model: DpsModel, out: np.ndarray, y: np.ndarray, kind: str) -> float:
    if kind == "squared":
        if out.ndim == 2:
            Y = one_hot(y, out.shape[1]) if y.ndim == 1 else y
            return float(np.sum((Y - out) ** 2))
        return float(np.sum((y - out) ** 2))
    P = out if out.ndim == 2 else np.column_stack([1 - out, out])
    labels = np.asarray(y, dtype=np.int64)
    p = P[np.arange(P.shape[0]), labels]
    return float(-np.sum(np.log(np.maximum(p, 1e-300))))


def penalty_terms(model: DpsModel) -> np.ndarray:
    """Per spline layer: sum over neurons of ``||D_r w_j||^2``."""
    out = []
    for w, op in zip(model.spline_weights, model.penalty_ops()):
        out.append(float(np.sum((w @ op.matrix.T) ** 2)))
    return np.array(out)


def penalized_loss(model: DpsModel, data: Dataset, loss_kind: str | None = None) -> float:
    """Residual term plus layer-wise difference penalty."""
    _check(model, data)
    kind = _loss_kind(model, loss_kind)
    out, _ = forward(model, data.features)
    return data_loss(model, out, data.response, kind) + float(np.dot(model.lambdas, penalty_terms(model)))


def output_grad(model: DpsModel, cache: ForwardCache, y: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the data loss with respect to the pre-head outputs (n x p_L)."""
    out = cache.output
    if kind == "squared":
        if out.ndim == 2:
            Y = one_hot(y, out.shape[1]) if y.ndim == 1 else y
            dP = -2.0 * (Y - out)
            # back through the softmax Jacobian
            return out * (dP - np.sum(dP * out, axis=1, keepdims=True))
        return (-2.0 * (y - out))[:, None]
    Y = one_hot(y, out.shape[1])
    return out - Y


@njit(cache=True)
def _gather_kernel(dF, span, dvals, m, D):
    # dz[i, j] = sum_k dF[i, k] * B'_k(z[i, j])
    n = dF.shape[0]
    dz = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            q = i * m + j
            base = span[q] - D
            acc = 0.0
            for r in range(D + 1):
                acc += dF[i, base + r] * dvals[q, r]
            dz[i, j] = acc
    return dz


def backprop(model: DpsModel, cache: ForwardCache, dlogits: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Weight gradients of ``sum(dlogits * logits)`` and the matching activation gradients.

    Returns ``(weight_grads, hidden_grads)`` where ``hidden_grads[l]`` is the
    gradient with respect to ``cache.hidden[l]``.
    """
    k = model.spec.num_spline_layers
    H = cache.last_hidden
    WL = model.last_layer_weights
    gWL = np.concatenate([dlogits.sum(axis=0)[:, None], dlogits.T @ H], axis=1)
    dh = dlogits @ WL[:, 1:]
    hidden_grads = [None] * (k + 1)
    spline_grads = [None] * k
    if k == 0:
        z = cache.squashed[0]
        dh = dh * z * (1.0 - z)
    for s in range(k - 1, -1, -1):
        hidden_grads[s + 1] = dh
        F = cache.features[s]
        w = model.spline_weights[s]
        spline_grads[s] = dh.T @ F
        dF = dh @ w
        n, m = cache.hidden[s].shape
        dz = _gather_kernel(dF, cache.spans[s], cache.basis_derivs[s], m, model.knot_vectors[s].degree)
        z = cache.squashed[s]
        dh = dz * z * (1.0 - z)
    hidden_grads[0] = dh
    gW1 = np.concatenate([dh.sum(axis=0)[:, None], dh.T @ cache.inputs], axis=1)
    return [gW1, *spline_grads, gWL], hidden_grads


def loss_and_gradients(model: DpsModel, data: Dataset, loss_kind: str | None = None):
    _check(model, data)
    kind = _loss_kind(model, loss_kind)
    out, cache = forward(model, data.features, need_derivs=True)
    loss = data_loss(model, out, data.response, kind)
    grads, _ = backprop(model, cache, output_grad(model, cache, data.response, kind))
    for s, (w, op, lam) in enumerate(zip(model.spline_weights, model.penalty_ops(), model.lambdas)):
        grads[1 + s] = grads[1 + s] + 2.0 * lam * (w @ op.penalty)
    loss += float(np.dot(model.lambdas, penalty_terms(model)))
    return loss, grads


def gradients(model: DpsModel, data: Dataset, loss_kind: str | None = None) -> list[np.ndarray]:
    """Gradient of :func:`penalized_loss` for ``[W1, spline layers..., W_L]``."""
    return loss_and_gradients(model, data, loss_kind)[1]


def fit(model, data: Dataset, opts: TrainOptions | None = None, objective=None):
    """Full-batch gradient descent with momentum and step halving.

    A step that would increase the objective is rejected: the learning rate
    is halved and the momentum buffer cleared.  Accepted steps grow the rate
    by ``opts.growth``.  Training stops when an epoch accepted without
    halving reduces the objective by less than ``opts.rel_tol`` relative.  ``objective(model, data, loss_kind)`` returning
    ``(loss, grads)`` can replace the DPS objective (used by baselines).

    Returns the fitted model and the objective after each accepted epoch
    (element 0 is the starting objective).
    """
    opts = opts or TrainOptions()
    objective = objective or loss_and_gradients
    kind = opts.loss_kind
    params = [p.copy() for p in model.params()]
    current = model.with_params(params)
    loss, grads = objective(current, data, kind)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite objective at the starting point")
    trajectory = [loss]
    lr = opts.learning_rate
    velocity = [np.zeros_like(p) for p in params]
    for epoch in range(opts.max_epochs):
        halved = False
        while True:
            step = [opts.momentum * v - lr * g for v, g in zip(velocity, grads)]
            trial = current.with_params([p + s for p, s in zip(params, step)])
            try:
                new_loss, new_grads = objective(trial, data, kind)
            except (ValueError, FloatingPointError):
                new_loss = np.inf
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            lr *= 0.5
            halved = True
            velocity = [np.zeros_like(p) for p in params]
            if lr < opts.min_learning_rate:
                if not np.isfinite(loss):
                    raise DivergenceError(f"objective diverged at epoch {epoch}")
                logger.debug("step size floor reached at epoch %d", epoch)
                return current, np.array(trajectory)
        velocity = step
        params = trial.params()
        current = trial
        rel = (loss - new_loss) / max(abs(loss), 1e-300)
        loss, grads = new_loss, new_grads
        trajectory.append(loss)
        lr *= opts.growth
        # after halvings the accepted step is short by construction, so only
        # full-length steps may signal convergence
        if rel < opts.rel_tol and not halved:
            break
    return current, np.array(trajectory)
