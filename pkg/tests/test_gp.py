"""Lifetime model, GP head and delta-method bands."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dps.gp import GpError, LifetimeInputs, delta_band, fit_gp_head, gp_predict, lifetime_eta, save_band, se_kernel, survival

BASE = dict(A_FEOL=50.0, a=-12.0, b=0.02, c=300.0, d=-30000.0, V=1.1, T=350.0, W=1.0, L=1.0, s=0.8, beta=2.0)


def test_eta_collapses_to_inverse_e():
    inp = LifetimeInputs(A_FEOL=1, a=0, b=0, c=0, d=0, V=1, T=300, W=1, L=1, s=1, beta=1)
    np.testing.assert_allclose(lifetime_eta(inp), np.exp(-1), rtol=1e-15)


valid = st.fixed_dictionaries(
    dict(
        A_FEOL=st.floats(0.1, 1e3),
        a=st.floats(-20, 0),
        b=st.floats(0, 0.05),
        c=st.floats(0, 500),
        d=st.floats(-50000, 0),
        V=st.floats(0.5, 2),
        T=st.floats(250, 450),
        W=st.floats(0.1, 10),
        L=st.floats(0.1, 10),
        s=st.floats(0.01, 1),
        beta=st.floats(0.2, 10),
    )
)


@given(valid)
def test_eta_direct_evaluation(kw):
    """[DERIVED] straightforward evaluation of the lifetime formula."""
    b = kw["beta"]
    expect = (
        kw["A_FEOL"]
        * (kw["W"] * kw["L"]) ** (-1 / b)
        * np.exp(-1 / b)
        * kw["V"] ** (kw["a"] + kw["b"] * kw["T"])
        * np.exp((kw["c"] * kw["T"] + kw["d"]) / kw["T"] ** 2)
        / kw["s"]
    )
    np.testing.assert_allclose(lifetime_eta(LifetimeInputs(**kw)), expect, rtol=1e-12)


@given(valid)
def test_survival_at_eta_is_inverse_e(kw):
    """[PAPER] eta is the 63.2% failure time."""
    eta = lifetime_eta(LifetimeInputs(**kw))
    assert abs(survival(eta, eta, kw["beta"]) - np.exp(-1)) <= 1e-12


@given(st.floats(0.1, 100), st.floats(0.2, 8))
def test_survival_shape(eta, beta):
    t = np.linspace(0, 20 * eta, 200)
    S = survival(t, eta, beta)
    assert S[0] == 1.0
    assert np.all(np.diff(S) <= 0)
    assert survival(eta * 40.0 ** (1 / beta), eta, beta) < 1e-12


@pytest.mark.parametrize("field,value", [("V", 0.0), ("T", -1.0), ("s", 1.5), ("s", 0.0), ("beta", 0.0), ("W", np.nan)])
def test_lifetime_domain(field, value):
    with pytest.raises(ValueError):
        LifetimeInputs(**{**BASE, field: value})


def test_survival_domain():
    with pytest.raises(ValueError):
        survival(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        survival(1.0, 0.0, 1.0)


# -- GP head ----------------------------------------------------------------


def dense_posterior(gp, Zs):
    """[DERIVED] dense linear solves with the fitted hyperparameters."""
    K = se_kernel(gp.Z, gp.Z, gp.lengthscale, gp.signal_var) + gp.nugget * np.eye(gp.Z.shape[0])
    Ks = se_kernel(gp.Z, Zs, gp.lengthscale, gp.signal_var)
    y = gp.factor @ (gp.factor.T @ gp.alpha)  # centred training responses
    mean = gp.mean + Ks.T @ np.linalg.solve(K, y)
    var = gp.signal_var + gp.nugget - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks))
    return mean, var


def test_gp_matches_dense_solve():
    x = np.linspace(0, 1, 30)
    y = np.sin(2 * np.pi * x)
    gp = fit_gp_head(x, y)
    Zs = np.linspace(-0.2, 1.2, 57)[:, None]
    m, v = gp_predict(gp, Zs)
    dm, dv = dense_posterior(gp, Zs)
    np.testing.assert_allclose(m, dm, rtol=0, atol=1e-8)
    np.testing.assert_allclose(v, np.maximum(dv, 0), rtol=0, atol=1e-8)
    np.testing.assert_allclose(gp.factor @ gp.factor.T, se_kernel(gp.Z, gp.Z, gp.lengthscale, gp.signal_var) + gp.nugget * np.eye(30), atol=1e-8)


def test_gp_random_case_dense(rng):
    Z = rng.normal(size=(25, 3))
    y = Z[:, 0] ** 2 - Z[:, 1] + 0.1 * rng.normal(size=25)
    gp = fit_gp_head(Z, y)
    Zs = rng.normal(size=(10, 3))
    m, v = gp_predict(gp, Zs)
    dm, dv = dense_posterior(gp, Zs)
    np.testing.assert_allclose(m, dm, atol=1e-8)
    np.testing.assert_allclose(v, np.maximum(dv, 0), atol=1e-8)


def test_gp_log_marginal_is_grid_max(rng):
    """[DERIVED] direct Gaussian log-density at every grid point."""
    from scipy import stats

    Z = rng.uniform(size=(15, 2))
    y = np.cos(3 * Z[:, 0]) + Z[:, 1]
    gp = fit_gp_head(Z, y, grid_size=6)
    yc = y - y.mean()
    best = -np.inf
    d = np.sqrt(((Z[:, None] - Z[None]) ** 2).sum(-1))[np.triu_indices(15, 1)]
    for ell in np.median(d) * np.geomspace(1e-2, 1e2, 6):
        for sv in yc.var() * np.geomspace(1e-2, 1e4, 6):
            K = se_kernel(Z, Z, ell, sv) + gp.nugget * np.eye(15)
            best = max(best, stats.multivariate_normal(np.zeros(15), K, allow_singular=True).logpdf(yc))
    np.testing.assert_allclose(gp.log_marginal, best, rtol=1e-6)


def test_gp_constant_response():
    Z = np.linspace(0, 1, 10)[:, None]
    gp = fit_gp_head(Z, np.full(10, 3.5))
    m, v = gp_predict(gp, np.array([[0.33], [0.9]]))
    np.testing.assert_allclose(m, 3.5, atol=1e-12)
    _, vt = gp_predict(gp, Z)
    assert np.all(vt <= 2 * gp.nugget)


def test_gp_training_residual_is_nugget_times_alpha(rng):
    """At the training inputs the mean is exactly ``y - nugget * alpha``."""
    Z = rng.uniform(size=(20, 2))
    y = np.sin(4 * Z[:, 0]) * Z[:, 1]
    gp = fit_gp_head(Z, y)
    m, v = gp_predict(gp, Z)
    np.testing.assert_allclose(y - m, gp.nugget * gp.alpha, rtol=1e-6, atol=1e-12)
    assert np.all(v <= 10 * gp.nugget)


def test_gp_interpolates_training_points():
    Z = np.linspace(0, 1, 12)[:, None]
    y = np.sin(2 * np.pi * Z[:, 0])
    gp = fit_gp_head(Z, y)
    m, v = gp_predict(gp, Z)
    np.testing.assert_allclose(m, y, atol=1e-4)
    assert np.all(v <= 10 * gp.nugget)


def test_gp_prior_reversion_far_away(rng):
    Z = rng.uniform(size=(12, 1))
    gp = fit_gp_head(Z, np.sin(5 * Z[:, 0]))
    m, v = gp_predict(gp, np.array([[1e4]]))
    np.testing.assert_allclose(v, gp.signal_var + gp.nugget, rtol=1e-12)
    np.testing.assert_allclose(m, gp.mean, atol=1e-12)


@given(st.integers(0, 10_000))
def test_gp_variance_nonnegative(seed):
    r = np.random.default_rng(seed)
    Z = r.uniform(size=(8, 2))
    gp = fit_gp_head(Z, r.normal(size=8), grid_size=5)
    _, v = gp_predict(gp, np.vstack([Z, r.uniform(-1, 2, size=(20, 2))]))
    assert np.all(v >= 0)


def test_gp_duplicate_rows_escalate_nugget():
    Z = np.repeat(np.linspace(0, 1, 6), 3)[:, None]
    y = np.repeat(np.sin(np.linspace(0, 3, 6)), 3) + np.tile([0.0, 1e-3, -1e-3], 6)
    gp = fit_gp_head(Z, y, grid_size=5)
    assert gp.nugget >= 1e-6 * y.var()
    assert np.all(np.isfinite(gp_predict(gp, Z)[0]))


def test_gp_nugget_ceiling_raises(monkeypatch):
    import dps.gp as gpmod

    monkeypatch.setattr(gpmod, "_chol", lambda K: None)
    with pytest.raises(GpError):
        fit_gp_head(np.linspace(0, 1, 5), np.arange(5.0))


def test_gp_input_validation():
    with pytest.raises(ValueError):
        fit_gp_head(np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        fit_gp_head(np.zeros((4, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        fit_gp_head(np.array([[0.0], [np.nan], [1.0]]), np.zeros(3))
    gp = fit_gp_head(np.random.default_rng(0).uniform(size=(5, 2)), np.arange(5.0))
    with pytest.raises(ValueError):
        gp_predict(gp, np.zeros((1, 3)))


# -- delta-method bands --------------------------------------------------------


def test_band_collapses_without_variance():
    t = np.linspace(0, 5, 11)
    S, lo, hi = delta_band(2.0, 0.0, 1.5, t)
    np.testing.assert_array_equal(lo, S)
    np.testing.assert_array_equal(hi, S)


def test_band_zero_width_at_origin():
    _, lo, hi = delta_band(2.0, 0.3, 2.0, [0.0, 1.0])
    assert lo[0] == hi[0] == 1.0
    assert hi[1] > lo[1]


def test_band_matches_finite_difference_propagation():
    """[DERIVED] finite-difference derivative of S in eta."""
    eta, var, beta, t = 1.0, 0.01, 1.0, 1.0
    S, lo, hi = delta_band(eta, var, beta, [t], level=0.95)
    h = 1e-6
    dS = (survival(t, eta + h, beta) - survival(t, eta - h, beta)) / (2 * h)
    sd = abs(dS) * np.sqrt(var)
    np.testing.assert_allclose((hi[0] - lo[0]) / (2 * 1.959963984540054), sd, rtol=1e-2)


@given(st.floats(0.5, 50), st.floats(0, 4), st.floats(0.3, 5), st.floats(0.5, 0.99))
def test_band_contains_curve_and_is_symmetric(eta, var, beta, level):
    t = np.linspace(0, 3 * eta, 25)
    S, lo, hi = delta_band(eta, var, beta, t, level)
    assert np.all(lo <= S) and np.all(S <= hi)
    assert np.all((lo >= 0) & (hi <= 1))
    inner = (lo > 0) & (hi < 1)
    np.testing.assert_allclose((hi - S)[inner], (S - lo)[inner], rtol=1e-9, atol=1e-15)


def test_band_preconditions():
    with pytest.raises(ValueError):
        delta_band(1.0, -0.1, 1.0, [1.0])
    with pytest.raises(ValueError):
        delta_band(1.0, 0.1, 1.0, [1.0], level=1.0)


def test_save_band(tmp_path):
    t = np.array([0.0, 1.0])
    S, lo, hi = delta_band(2.0, 0.1, 2.0, t)
    save_band(tmp_path / "b.csv", t, S, lo, hi)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "t,S,lower,upper"
    assert [float(v) for v in lines[2].split(",")] == [1.0, S[1], lo[1], hi[1]]
