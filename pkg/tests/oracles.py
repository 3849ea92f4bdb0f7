"""Shared oracles: finite differences, a penalised ridge solve, random models."""

import numpy as np
from scipy import optimize

from dps.data import Dataset
from dps.ecm import proper_penalty
from dps.model import NetworkSpec, init_model
from dps.train import penalized_loss


def perturbed(spec, seed, scale=0.2):
    r = np.random.default_rng(seed)
    m = init_model(spec)
    sw = [w + scale * r.standard_normal(w.shape) for w in m.spline_weights]
    return m.with_params([m.first_layer_weights, *sw, m.last_layer_weights]).with_lambdas(r.uniform(0.1, 2, spec.num_spline_layers))


def fd_gradient(model, data, h=1e-6, loss_kind=None):
    P = model.params()
    out = []
    for li, p in enumerate(P):
        g = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            vals = []
            for step in (h, -h):
                Q = [q.copy() for q in P]
                Q[li][idx] += step
                vals.append(penalized_loss(model.with_params(Q), data, loss_kind))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def max_rel_error(an, fd):
    worst = 0.0
    for a, f in zip(an, fd):
        den = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - f) / den)))
    return worst


def gradient_check_setup(seed):
    """Random model (2 spline layers, p=8, N=10, d=3) and data."""
    r = np.random.default_rng(seed)
    model = perturbed(NetworkSpec(3, (8, 8, 8, 1), (10, 10), seed=seed), seed)
    return model, Dataset(r.normal(size=(20, 3)), 0.5 * r.normal(size=20))


def ridge_oracle(B, y, lam, S, eps=1e-8):
    """Minimiser of ``||y - B w||^2 + lam w' S~ w`` by a generic bounded least-squares solver."""
    R = np.linalg.cholesky(proper_penalty(S, eps)).T
    A = np.vstack([B, np.sqrt(lam) * R])
    b = np.concatenate([y, np.zeros(B.shape[1])])
    return optimize.lsq_linear(A, b, method="bvls", tol=1e-14).x
