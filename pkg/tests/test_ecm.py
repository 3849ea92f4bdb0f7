"""Closed-form random-effect updates and the tuning loop."""

import time
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from dps.basis import difference_op, eval_basis_matrix, make_uniform_knots
from dps.data import Dataset
from dps.ecm import (
    LAMBDA_CAP,
    EcmOptions,
    RankDeficiencyWarning,
    em_layer,
    em_stacked,
    ecm_tune,
    first_layer_ols,
    last_layer_fit,
    layer_log_likelihood,
    output_jacobians,
    posterior_moments,
    proper_penalty,
    stacked_layer,
    update_lambda,
    update_sigma2,
    update_xi2,
    working_response,
)
from dps.model import NetworkSpec, forward, init_model
from dps.train import TrainOptions, fit

from oracles import ridge_oracle


def spline_design(n, N, rng):
    return eval_basis_matrix(make_uniform_knots(N, 3), rng.uniform(0, 1, n))


# -- least-squares blocks ----------------------------------------------------


def test_ols_exact_linear(rng):
    X = rng.normal(size=(30, 3))
    W = rng.normal(size=(2, 4))
    Y = W[:, 0] + X @ W[:, 1:].T
    np.testing.assert_allclose(first_layer_ols(X, Y), W, rtol=1e-10, atol=1e-12)


def test_ols_orthonormal_design(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(12, 4)))
    y = rng.normal(size=(12, 2))
    np.testing.assert_allclose(first_layer_ols(Q, y, intercept=False), (Q.T @ y).T, atol=1e-12)


def test_ols_normal_equations(rng):
    """[DERIVED] normal-equations oracle."""
    X = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    A = np.column_stack([np.ones(20), X])
    np.testing.assert_allclose(first_layer_ols(X, y)[0], np.linalg.solve(A.T @ A, A.T @ y), rtol=1e-10, atol=1e-12)


def test_ols_weighted(rng):
    X = rng.normal(size=(25, 2))
    y = rng.normal(size=25)
    w = rng.uniform(0.1, 2, 25)
    A = np.column_stack([np.ones(25), X])
    expect = np.linalg.solve(A.T @ (w[:, None] * A), A.T @ (w * y))
    np.testing.assert_allclose(first_layer_ols(X, y, weights=w)[0], expect, rtol=1e-10)


def test_ols_rank_deficient_warns_and_is_min_norm(rng):
    x = rng.normal(size=15)
    X = np.column_stack([x, x])
    y = 3 * x + 1
    with pytest.warns(RankDeficiencyWarning):
        W = first_layer_ols(X, y)
    np.testing.assert_allclose(W[0], [1.0, 1.5, 1.5], atol=1e-10)


def test_last_layer_cases(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(10, 3)))
    y = rng.normal(size=10)
    np.testing.assert_allclose(last_layer_fit(Q, y)[0], Q.T @ y, atol=1e-12)
    y_in = Q @ np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(Q @ last_layer_fit(Q, y_in)[0], y_in, atol=1e-12)
    H = rng.normal(size=(30, 4))
    Y = rng.normal(size=(30, 2))
    np.testing.assert_allclose(last_layer_fit(H, Y), np.linalg.solve(H.T @ H, H.T @ Y).T, rtol=1e-10)


# -- posterior moments -------------------------------------------------------


def test_posterior_small_lambda_is_ols(rng):
    B = spline_design(50, 8, rng)
    y = rng.normal(size=50)
    mu, _ = posterior_moments(B, y, 1e-10, 1e4, difference_op(8, 2).penalty)
    np.testing.assert_allclose(mu, np.linalg.lstsq(B, y, rcond=None)[0], rtol=1e-6, atol=1e-6)


def test_posterior_large_lambda_is_linear_in_index(rng):
    B = spline_design(60, 10, rng)
    y = rng.normal(size=60)
    # lambda = 1e5: far above the data scale, while lambda * eps stays small
    mu, _ = posterior_moments(B, y, 1.0, 1e-5, difference_op(10, 2).penalty)
    k = np.arange(10.0)
    L = np.column_stack([np.ones(10), k])
    ab = np.linalg.lstsq(B @ L, y, rcond=None)[0]
    np.testing.assert_allclose(mu, L @ ab, atol=2e-3)


@pytest.mark.parametrize("seed", range(5))
def test_posterior_mean_is_penalised_minimiser(seed):
    r = np.random.default_rng(seed)
    B = r.normal(size=(30, 8))
    y = r.normal(size=30)
    S = difference_op(8, 2).penalty
    sigma2, xi2 = r.uniform(0.1, 2), r.uniform(0.1, 2)
    mu, gamma = posterior_moments(B, y, sigma2, xi2, S)
    np.testing.assert_allclose(mu, ridge_oracle(B, y, sigma2 / xi2, S), rtol=0, atol=1e-8)
    np.testing.assert_allclose(gamma, gamma.T, atol=0)
    assert np.all(np.linalg.eigvalsh(gamma) > 0)


def test_posterior_rejects_nonpositive_variances(rng):
    with pytest.raises(ValueError):
        posterior_moments(np.eye(3), np.ones(3), 0.0, 1.0, np.eye(3))


def test_posterior_multi_column_equals_single_columns(rng):
    B = spline_design(40, 7, rng)
    Y = rng.normal(size=(40, 3))
    S = difference_op(7, 2).penalty
    mu, g = posterior_moments(B, Y, 0.5, 0.2, S)
    for j in range(3):
        mj, gj = posterior_moments(B, Y[:, j], 0.5, 0.2, S)
        np.testing.assert_allclose(mu[:, j], mj, rtol=1e-12)
        np.testing.assert_allclose(g, gj)


# -- variance updates --------------------------------------------------------


def test_xi2_arithmetic():
    assert update_xi2(np.array([1.0, 1.0]), np.eye(2), np.eye(2)) == 2.0


def test_xi2_vanishes_with_moments():
    assert update_xi2(np.zeros(4), 1e-14 * np.eye(4), np.eye(4)) < 1e-13


def test_xi2_elementwise_oracle(rng):
    """[DERIVED] explicit double sums over entries."""
    N, p = 5, 3
    M = rng.normal(size=(N, p))
    G = np.stack([np.cov(rng.normal(size=(N, 20))) for _ in range(p)])
    St = rng.normal(size=(N, N))
    St = St @ St.T
    total = 0.0
    for j in range(p):
        total += sum(St[a, b] * G[j][b, a] for a in range(N) for b in range(N))
        total += sum(M[a, j] * St[a, b] * M[b, j] for a in range(N) for b in range(N))
    np.testing.assert_allclose(update_xi2(M, G, St), total / (p * N), rtol=1e-12)


def test_sigma2_arithmetic():
    n, p = 6, 2
    Y = np.ones((n, p))
    assert update_sigma2(np.eye(n), Y, np.zeros((n, p)), np.zeros((n, n))) == 1.0


def test_sigma2_vanishes_for_exact_fit(rng):
    B = rng.normal(size=(10, 3))
    mu = rng.normal(size=3)
    assert update_sigma2(B, B @ mu, mu, 1e-15 * np.eye(3)) < 1e-13


def test_sigma2_monte_carlo(rng):
    """[DERIVED] E||y - B w||^2 under w ~ N(mu, Gamma), 10^6 draws."""
    n, N = 8, 4
    B = rng.normal(size=(n, N))
    y = rng.normal(size=n)
    mu = rng.normal(size=N)
    A = rng.normal(size=(N, N))
    G = 0.3 * A @ A.T
    draws = rng.multivariate_normal(mu, G, size=1_000_000)
    loss = np.sum((y[None, :] - draws @ B.T) ** 2, axis=1) / n
    se = loss.std() / np.sqrt(loss.size)
    assert abs(update_sigma2(B, y, mu, G) - loss.mean()) <= 3 * se


def test_lambda_update():
    assert update_lambda(0.5, 0.25) == 2.0
    assert update_lambda(3.3, 3.3) == 1.0
    assert update_lambda(1.0, 2.0) < update_lambda(1.0, 1.0) < update_lambda(2.0, 1.0)
    with pytest.warns(RuntimeWarning):
        assert update_lambda(1.0, 0.0) == LAMBDA_CAP


# -- likelihood and multicycle ECM ---------------------------------------------


def test_layer_log_likelihood_dense_oracle(rng):
    """[DERIVED] multivariate normal density with the dense covariance."""
    B = spline_design(25, 6, rng)
    Y = rng.normal(size=(25, 2))
    S = difference_op(6, 2).penalty
    sigma2, xi2, eps = 0.7, 0.4, 1e-2  # a ridge that keeps the dense covariance well conditioned
    cov = sigma2 * np.eye(25) + xi2 * B @ np.linalg.inv(proper_penalty(S, eps)) @ B.T
    expect = sum(stats.multivariate_normal(np.zeros(25), cov).logpdf(Y[:, j]) for j in range(2))
    np.testing.assert_allclose(layer_log_likelihood(B, Y, sigma2, xi2, S, eps), expect, rtol=1e-10)


@given(st.integers(0, 200))
def test_cm_updates_never_decrease_likelihood(seed):
    r = np.random.default_rng(seed)
    B = spline_design(60, 8, r)
    x = r.uniform(size=60)
    Y = np.column_stack([np.sin(6 * x), x**2]) + 0.2 * r.normal(size=(60, 2))
    checks = []
    em_layer(B, Y, difference_op(8, 2).penalty, 1.0, 1.0, iters=30, tol=0, checks=checks)
    for before, after in checks:
        assert after >= before - 1e-8 * max(1.0, abs(before))


# -- stacked layer ------------------------------------------------------------


def stacked_problem(rng, n=40, N=8, p=3, C=2):
    F = 2.0 * spline_design(n, N, rng)
    J = rng.normal(size=(n, C, p))
    z = rng.normal(size=(n, C))
    v = rng.uniform(0.5, 2.0, size=(n, C))
    return F, J, z, v, difference_op(N, 2).penalty


def test_dual_equals_primal(rng):
    """[DERIVED] both eigendecompositions describe the same layer model."""
    for n in (5, 40):  # fewer and more observations than coefficients
        F, J, z, v, S = stacked_problem(rng, n=n)
        a, b = stacked_layer(F, J, z, v, S, "primal"), stacked_layer(F, J, z, v, S, "dual")
        assert a.theta.size == b.theta.size
        np.testing.assert_allclose(a.theta, b.theta, rtol=1e-9, atol=1e-9 * a.theta.max())
        for s2, x2 in [(0.3, 0.9), (2.0, 0.01)]:
            np.testing.assert_allclose(a.moments(s2, x2), b.moments(s2, x2), rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(a.log_likelihood(s2, x2), b.log_likelihood(s2, x2), rtol=1e-10)
            np.testing.assert_allclose(a.posterior_mean(s2, x2), b.posterior_mean(s2, x2), rtol=1e-7, atol=1e-9)


def test_stacked_matches_coefficient_space(rng):
    """[DERIVED] one neuron and unit Jacobian reduce to the plain layer model."""
    n, N = 50, 9
    F = spline_design(n, N, rng)
    z = rng.normal(size=n)
    S = difference_op(N, 2).penalty
    layer = stacked_layer(F, np.ones((n, 1, 1)), z[:, None], np.ones((n, 1)), S)
    for s2, x2 in [(0.5, 0.2), (1.0, 3.0)]:
        mu, _ = posterior_moments(F, z, s2, x2, S)
        np.testing.assert_allclose(layer.posterior_mean(s2, x2)[0], mu, rtol=1e-5, atol=1e-6)
    # log-likelihoods differ only by a constant from the fixed-effect treatment of the null space
    d1 = layer.log_likelihood(0.5, 0.2) - layer_log_likelihood(F, z, 0.5, 0.2, S)
    d2 = layer.log_likelihood(1.3, 2.0) - layer_log_likelihood(F, z, 1.3, 2.0, S)
    # both include log xi2 for the null directions, so the eps-dependent constant cancels
    np.testing.assert_allclose(d1, d2, rtol=1e-6)


def test_stacked_posterior_mean_minimises_linearised_objective(rng):
    """[DERIVED] normal equations of the weighted, penalised stacked problem."""
    F, J, z, v, S = stacked_problem(rng)
    n, C, p = J.shape
    N = F.shape[1]
    s2, x2 = 0.4, 0.8
    W = stacked_layer(F, J, z, v, S).posterior_mean(s2, x2)
    Z = (np.sqrt(v)[:, :, None, None] * J[:, :, :, None] * F[:, None, None, :]).reshape(n * C, p * N)
    zw = (np.sqrt(v) * z).ravel()
    A = Z.T @ Z + (s2 / x2) * np.kron(np.eye(p), S)
    grad = A @ W.ravel() - Z.T @ zw
    assert np.max(np.abs(grad)) < 1e-8 * np.max(np.abs(Z.T @ zw))


@given(st.integers(0, 100))
def test_stacked_cm_updates_monotone(seed):
    F, J, z, v, S = stacked_problem(np.random.default_rng(seed))
    checks = []
    em_stacked(stacked_layer(F, J, z, v, S), 1.0, 1.0, iters=40, tol=0, checks=checks)
    for before, after in checks:
        assert after >= before - 1e-8 * max(1.0, abs(before))


def test_stacked_cost_grows_at_most_cubically(rng):
    """Doubling the coefficient count costs at most 2^3 (with timing slack)."""

    def cost(N):
        F, J, z, v, S = stacked_problem(rng, n=400, N=N, p=6, C=1)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            em_stacked(stacked_layer(F, J, z, v, S), 1.0, 1.0, iters=5, tol=0)
            best = min(best, time.perf_counter() - t0)
        return best

    small, large = cost(20), cost(40)
    assert large <= 8 * 2 * small + 0.05


# -- tuning loop -------------------------------------------------------------


def sine_data(n=200, seed=0, noise=True):
    r = np.random.default_rng(seed)
    x = r.uniform(0, 1, n)
    f = np.sin(2 * np.pi * x)
    y = f + (r.normal(0, np.sqrt(0.05 * f.var()), n) if noise else 0.0)
    return Dataset(x[:, None], y), f


def tuned(data, cycles=10, warm=500, seed=0, **kw):
    m = init_model(NetworkSpec(1, (4, 1, 1), (10,), seed=seed)).standardized(data.features)
    m, _ = fit(m, data, TrainOptions(max_epochs=warm))
    return ecm_tune(m, data, options=EcmOptions(max_cycles=cycles, **kw))


def test_ecm_deterministic():
    data, _ = sine_data()
    a = tuned(data, cycles=3)
    b = tuned(data, cycles=3)
    np.testing.assert_array_equal([r.lambdas for r in a[2]], [r.lambdas for r in b[2]])
    for p, q in zip(a[0].params(), b[0].params()):
        np.testing.assert_array_equal(p, q)


def test_ecm_lambdas_positive_and_recorded():
    data, f = sine_data()
    model, state, traj = tuned(data, cycles=6, record_checks=True)
    assert len(traj) >= 2
    for rec in traj:
        assert np.all(np.isfinite(rec.lambdas)) and np.all(rec.lambdas > 0)
        assert rec.log_likelihood.shape == (1,)
        for before, after in rec.cm_checks:
            assert after >= before - 1e-8 * max(1.0, abs(before))
    np.testing.assert_allclose(state.lambdas, [s.sigma2 / s.xi2 for s in state.layers], rtol=1e-12)
    assert np.mean((model.predict(data.features) - f) ** 2) < 0.05


def test_ecm_noise_free_null_space_data():
    """Data from a ramp-spline network lie in the penalty's null space.

    Smoothing is then preferred by the likelihood (it increases with the
    penalty at any fixed noise variance) and the tuned fit stays exact.
    """
    x = np.linspace(0, 1, 120)[:, None]
    m = init_model(NetworkSpec(1, (4, 1, 1), (10,), seed=0)).standardized(x)
    data = Dataset(x, m.predict(x))
    _, cache = forward(m, x, need_derivs=True)
    J = output_jacobians(m, cache)[1]
    z, v = working_response(m, cache, data.response, J, cache.hidden[1])
    layer = stacked_layer(cache.features[0], J, z, v, m.penalty_ops()[0].penalty)
    lls = [layer.log_likelihood(1e-6, 1e-6 / lam) for lam in np.geomspace(1e-3, 1e6, 10)]
    assert np.all(np.diff(lls) > 0)
    model, state, traj = ecm_tune(m, data, options=EcmOptions(max_cycles=8))
    assert all(np.isfinite(r.lambdas[0]) and r.lambdas[0] > 0 for r in traj)
    assert np.mean((model.predict(x) - data.response) ** 2) <= 1e-6


def test_ecm_needs_spline_layer():
    m = init_model(NetworkSpec(1, (2, 1), ()))
    with pytest.raises(ValueError):
        ecm_tune(m, Dataset(np.zeros((3, 1)), np.zeros(3)))


def test_ecm_classification_runs(rng):
    X = rng.normal(size=(120, 2))
    labels = (X[:, 0] * X[:, 1] > 0).astype(np.int64)
    data = Dataset(X, labels)
    m = init_model(NetworkSpec(2, (6, 4, 2), (8,), output_kind="softmax")).standardized(X)
    m, _ = fit(m, data, TrainOptions(max_epochs=300))
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        model, state, traj = ecm_tune(m, data, options=EcmOptions(max_cycles=4))
    assert np.all(state.lambdas > 0)
    P = model.predict(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
