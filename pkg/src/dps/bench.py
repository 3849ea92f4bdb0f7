"""Simulation functions, data generation, baselines and experiment drivers."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit
from scipy import linalg

from .basis import eval_basis_matrix, make_uniform_knots
from .data import Dataset
from .gp import LifetimeInputs, fit_gp_head, gp_predict, lifetime_eta
from .model import DpsModel, NetworkSpec, forward, init_model, squash
from .select import TuningBudget, tune_candidate
from .train import TrainOptions, fit

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# true functions


def _example1(X):
    return np.exp(2.0 * np.sin(0.5 * np.pi * X[:, 0]) + 0.5 * np.cos(2.5 * np.pi * X[:, 1]))


def _g1(X):
    a = np.arange(1, X.shape[1] + 1) / 2.0
    return np.prod((np.abs(4.0 * X - 2.0) + a) / (1.0 + a), axis=1)


def _g2(X):
    i = np.arange(1, X.shape[1] + 1)
    return X @ ((-1.0) ** i / i)


def _g3(X):
    return np.exp(X[:, 0] ** 2 - np.sqrt(X[:, 1] + 5.0)) + 0.01 / np.tan(1.0 / (0.01 + np.abs(X[:, 2] + X[:, 3])))


def _sine(X):
    return np.sin(2.0 * np.pi * X[:, 0])


def _sincos(X):
    return np.sin(X[:, 0]) + np.cos(X[:, 1])


# Lifetime benchmark: process constants, and the ranges that the unit-cube
# inputs (V, T, W, L, s) are mapped onto.  The response is log(eta).
LIFETIME_CONSTANTS = {"A_FEOL": 50.0, "a": -12.0, "b": 0.02, "c": 300.0, "d": -30000.0, "beta": 2.0}
LIFETIME_RANGES = {"V": (1.0, 1.3), "T": (300.0, 400.0), "W": (0.5, 2.0), "L": (0.5, 2.0), "s": (0.5, 1.0)}


def lifetime_inputs(x) -> LifetimeInputs:
    """Map a point of the unit cube onto the lifetime model's inputs."""
    vals = {k: lo + float(u) * (hi - lo) for (k, (lo, hi)), u in zip(LIFETIME_RANGES.items(), x)}
    return LifetimeInputs(**LIFETIME_CONSTANTS, **vals)


def _lifetime(X):
    return np.array([math.log(lifetime_eta(lifetime_inputs(x))) for x in X])


_FUNCTIONS = {
    "example1": (_example1, 2),
    "g1": (_g1, None),
    "g2": (_g2, None),
    "g3": (_g3, 4),
    "lifetime": (_lifetime, len(LIFETIME_RANGES)),
    "sine": (_sine, 1),
    "sincos": (_sincos, 2),
}
FUNCTION_IDS = tuple(_FUNCTIONS)


def arity(function_id: str) -> int | None:
    if function_id not in _FUNCTIONS:
        raise ValueError(f"unknown function {function_id!r}; choose from {', '.join(FUNCTION_IDS)}")
    return _FUNCTIONS[function_id][1]


def true_function(function_id: str, x) -> np.ndarray | float:
    """Evaluate a benchmark function at one point (vector) or at the rows of a matrix."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    need = arity(function_id)
    if need is not None and X.shape[1] != need:
        raise ValueError(f"{function_id} takes {need} inputs, got {X.shape[1]}")
    out = _FUNCTIONS[function_id][0](X)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class SimSpec:
    function_id: str = "example1"
    input_dim: int | None = None
    train_n: int = 400
    test_n: int = 2000
    noise_fraction: float = 0.05
    seed: int = 0
    design: str = "uniform"  # "uniform" or "spacefilling"

    def __post_init__(self):
        need = arity(self.function_id)
        if self.input_dim is None:
            if need is None:
                raise ValueError(f"{self.function_id} needs input_dim")
            object.__setattr__(self, "input_dim", need)
        if need is not None and self.input_dim != need:
            raise ValueError(f"{self.function_id} takes {need} inputs, got input_dim={self.input_dim}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.train_n < 2:
            raise ValueError("train_n must be >= 2 (the noise level uses a sample variance)")
        if self.test_n < 1:
            raise ValueError("test_n must be >= 1")
        if self.noise_fraction < 0:
            raise ValueError("noise_fraction must be non-negative")
        if self.design not in ("uniform", "spacefilling"):
            raise ValueError(f"unknown design {self.design!r}")


def generate(spec: SimSpec) -> tuple[Dataset, Dataset]:
    """Noisy training set and noise-free test set.

    The noise variance is ``noise_fraction`` times the sample variance of the
    true function over the drawn training inputs.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    if spec.design == "spacefilling":
        seeds = rng.integers(0, 2**63, size=2)
        Xtr = spacefilling_design(spec.train_n, d, seed=int(seeds[0]))
        Xte = spacefilling_design(spec.test_n, d, seed=int(seeds[1]))
    else:
        Xtr = rng.uniform(size=(spec.train_n, d))
        Xte = rng.uniform(size=(spec.test_n, d))
    ftr = true_function(spec.function_id, Xtr)
    sd = math.sqrt(spec.noise_fraction * float(np.var(ftr, ddof=1)))
    ytr = ftr + rng.normal(0.0, 1.0, size=spec.train_n) * sd
    return Dataset(Xtr, ytr), Dataset(Xte, true_function(spec.function_id, Xte))


def mspe(predictions, truth) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} truths")
    return float(np.mean((p - t) ** 2))


# ---------------------------------------------------------------------------
# linear-neuron network baseline


@dataclass
class DnnModel:
    """Fully connected network with squashed linear neurons and an affine output."""

    weights: list[np.ndarray]  # each out x (in + 1), intercept first
    x_mean: np.ndarray
    x_scale: np.ndarray

    def params(self):
        return list(self.weights)

    def with_params(self, params):
        return replace(self, weights=list(params))

    def predict(self, X):
        return dnn_forward(self, X)[0]

    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights))


def init_dnn(input_dim: int, hidden: tuple[int, ...], seed: int = 0) -> DnnModel:
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, 1]
    ws = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = math.sqrt(6.0 / (fan_in + 1 + fan_out))
        ws.append(rng.uniform(-s, s, size=(fan_out, fan_in + 1)))
    return DnnModel(ws, np.zeros(input_dim), np.ones(input_dim))


def dnn_forward(model: DnnModel, X):
    X = (np.asarray(X, dtype=float) - model.x_mean) / model.x_scale
    acts = [X]
    h = X
    for w in model.weights[:-1]:
        h = squash(h @ w[:, 1:].T + w[:, 0])
        acts.append(h)
    w = model.weights[-1]
    return h @ w[:, 1:].T[:, 0] + w[0, 0], acts


def dnn_objective(model: DnnModel, data: Dataset, loss_kind=None):
    """Residual sum of squares and its gradient (the :func:`fit` objective hook)."""
    out, acts = dnn_forward(model, data.features)
    r = out - data.response
    loss = float(r @ r)
    g = 2.0 * r[:, None]
    grads = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        a = acts[k]
        w = model.weights[k]
        grads[k] = np.concatenate([g.sum(axis=0)[:, None], g.T @ a], axis=1)
        if k > 0:
            g = (g @ w[:, 1:]) * a * (1.0 - a)
    return loss, grads


# ---------------------------------------------------------------------------
# methods


@dataclass(frozen=True)
class MethodConfig:
    """Shared settings of the compared methods.

    DPS: warm-up descent then ECM tuning (``budget``).  DS: the same network
    with all penalties zero, trained for the same total number of epochs.
    DNN: ``dnn_hidden`` squashed linear layers, same trainer and epochs.
    """

    spline_layers: int = 2
    neurons: int = 50
    knots: int = 15
    budget: TuningBudget = field(default_factory=TuningBudget)
    dnn_hidden: tuple[int, ...] = (50, 50)

    @property
    def total_epochs(self) -> int:
        b = self.budget
        return b.warmup_epochs + b.max_cycles * b.refine_epochs

    def spec(self, input_dim: int, seed: int) -> NetworkSpec:
        return NetworkSpec.regression(input_dim, self.spline_layers, self.neurons, self.knots, seed=seed)


def fit_method(method: str, train: Dataset, cfg: MethodConfig, seed: int):
    """Train one method; the fitted object has ``predict``."""
    if method == "DPS":
        return tune_candidate(cfg.spec(train.d, seed), train, replace(cfg.budget, seed=seed))
    if method == "DS":
        model = init_model(cfg.spec(train.d, seed)).standardized(train.features)
        model = model.with_lambdas(np.zeros(cfg.spline_layers))
        return fit(model, train, TrainOptions(max_epochs=cfg.total_epochs))[0]
    if method == "DNN":
        model = init_dnn(train.d, cfg.dnn_hidden, seed)
        scale = train.features.std(axis=0)
        scale[scale == 0] = 1.0
        model = replace(model, x_mean=train.features.mean(axis=0), x_scale=scale)
        return fit(model, train, TrainOptions(max_epochs=cfg.total_epochs), objective=dnn_objective)[0]
    raise ValueError(f"unknown method {method!r}")


def replicate_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# experiments


RAW_HEADER = ["method", "n", "d", "replicate", "mspe"]
AGG_HEADER = ["method", "n", "d", "mean", "sd"]


@dataclass
class ExperimentResult:
    """Replicate rows and their aggregate; ``extra`` names leading grouping columns."""

    raw: list[dict]
    extra: tuple[str, ...] = ()

    def aggregate(self) -> list[dict]:
        keys = [*self.extra, "method", "n", "d"]
        groups: dict[tuple, list[float]] = {}
        for row in self.raw:
            groups.setdefault(tuple(row[k] for k in keys), []).append(row["mspe"])
        out = []
        for key, vals in groups.items():
            v = np.array(vals)
            row = dict(zip(keys, key))
            row["mean"] = float(v.mean())
            row["sd"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
            row["mean_log"] = float(np.mean(np.log(v)))
            out.append(row)
        return out

    def mean(self, method: str, **where) -> float:
        vals = [r["mspe"] for r in self.raw if r["method"] == method and all(r[k] == v for k, v in where.items())]
        return float(np.mean(vals))

    def write(self, raw_path, agg_path) -> None:
        _write_rows(raw_path, [*self.extra, *RAW_HEADER], self.raw)
        header = [*self.extra, *AGG_HEADER] + (["mean_log"] if self.extra else [])
        _write_rows(agg_path, header, self.aggregate())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def _job(args):
    method, sim, cfg, model_seed, tags = args
    train, test = generate(sim)
    model = fit_method(method, train, cfg, model_seed)
    return {**tags, "method": method, "n": sim.train_n, "d": sim.input_dim, "mspe": mspe(model.predict(test.features), test.response)}


def _run(jobs_list, jobs: int) -> list[dict]:
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_job, jobs_list))
    return [_job(j) for j in jobs_list]


def run_example1(replicates: int = 20, sizes=(200, 400, 800), methods=("DPS", "DS", "DNN"), cfg: MethodConfig | None = None, seed: int = 0, test_n: int = 2000, jobs: int = 1) -> ExperimentResult:
    """Example-1 comparison; every method sees the same data and initial seed per replicate."""
    cfg = cfg or MethodConfig()
    work = []
    for n, rep in itertools.product(sizes, range(replicates)):
        sim = SimSpec("example1", 2, n, test_n, seed=replicate_seed(seed, 1, n, rep))
        for m in methods:
            work.append((m, sim, cfg, replicate_seed(seed, 2, n, rep), {"replicate": rep}))
    return ExperimentResult(_run(work, jobs))


def run_double_descent(knots=tuple(range(10, 101, 10)), n: int = 800, replicates: int = 5, methods=("DPS", "DS"), cfg: MethodConfig | None = None, function_id: str = "example1", seed: int = 0, test_n: int = 2000, jobs: int = 1) -> ExperimentResult:
    """Knot sweep; raw and aggregate tables carry a leading ``knots`` column."""
    cfg = cfg or MethodConfig()
    work = []
    for N, rep in itertools.product(knots, range(replicates)):
        sim = SimSpec(function_id, arity(function_id), n, test_n, seed=replicate_seed(seed, 1, n, rep))
        for m in methods:
            work.append((m, sim, replace(cfg, knots=N), replicate_seed(seed, 2, n, rep), {"knots": N, "replicate": rep}))
    return ExperimentResult(_run(work, jobs), extra=("knots",))


def run_dimension_scaling(dims=(2, 6, 10), sizes=(400, 800, 1600), replicates: int = 3, methods=("DPS", "DS"), cfg: MethodConfig | None = None, seed: int = 0, test_n: int = 2000, jobs: int = 1) -> ExperimentResult:
    """MSPE of the product function over input dimension and sample size."""
    cfg = cfg or MethodConfig()
    work = []
    for d, n, rep in itertools.product(dims, sizes, range(replicates)):
        sim = SimSpec("g1", d, n, test_n, seed=replicate_seed(seed, 1, d, n, rep))
        for m in methods:
            work.append((m, sim, cfg, replicate_seed(seed, 2, d, n, rep), {"replicate": rep}))
    return ExperimentResult(_run(work, jobs))


def scaling_ratios(result: ExperimentResult, method: str = "DPS") -> list[dict]:
    """``MSPE(next n) / MSPE(n)`` per dimension for consecutive sample sizes."""
    agg = [r for r in result.aggregate() if r["method"] == method]
    out = []
    for d in sorted({r["d"] for r in agg}):
        rows = sorted((r for r in agg if r["d"] == d), key=lambda r: r["n"])
        for lo, hi in zip(rows[:-1], rows[1:]):
            out.append({"method": method, "d": d, "n_small": lo["n"], "n_large": hi["n"], "ratio": hi["mean"] / lo["mean"]})
    return out


def sweep_ratio(result: ExperimentResult, method: str) -> float:
    """Largest over smallest mean MSPE across the sweep."""
    means = [r["mean"] for r in result.aggregate() if r["method"] == method]
    return max(means) / min(means)


# ---------------------------------------------------------------------------
# structure-selection speed


@dataclass
class SpeedResult:
    """Wall-clock and test error of the two structure-selection routes."""

    dps_seconds: float
    dnn_seconds: float
    dps_mspe: float
    dnn_mspe: float
    dps_winner: NetworkSpec
    dnn_winner: int
    dps_parameters: list[int]
    dnn_parameters: list[int]

    @property
    def ratio(self) -> float:
        return self.dps_seconds / self.dnn_seconds


def run_tuning_speed(
    n: int = 800,
    test_n: int = 200,
    neurons=(10, 20, 30, 40),
    knots=(10, 15),
    dnn_widths=None,
    folds: int = 5,
    budget: TuningBudget | None = None,
    seed: int = 0,
) -> SpeedResult:
    """GCV selection over one-spline-layer DPS candidates versus k-fold CV over
    one-hidden-layer networks, both trained by :func:`fit`.

    Every network (each DNN fold fit and the final refit included) gets the
    epoch budget of one DPS candidate, warm-up plus refinement.  By default
    the DNN widths are matched to the DPS candidates' parameter counts.
    """
    from .select import CandidateGrid, structure_search

    budget = budget or TuningBudget(seed=seed)
    train, test = generate(SimSpec("sincos", None, n, test_n, seed=replicate_seed(seed, 4)))
    grid = CandidateGrid(tuple(neurons), tuple(knots), (1,))
    if dnn_widths is None:
        # a width-M network on two inputs has 4M + 1 parameters
        dnn_widths = tuple(max(1, round((spec.num_parameters() - 1) / 4)) for spec in grid.specs(2))
    t0 = time.perf_counter()
    report = structure_search(grid, train, replace(budget, seed=seed))
    dps_seconds = time.perf_counter() - t0
    dps_model = report.models[report.winner]
    epochs = MethodConfig(budget=budget).total_epochs
    cfgs = [MethodConfig(budget=budget, dnn_hidden=(M,)) for M in dnn_widths]
    fold_of = np.random.default_rng(replicate_seed(seed, 5)).permutation(n) % folds
    t0 = time.perf_counter()
    cv = []
    for cfg in cfgs:
        err = 0.0
        for k in range(folds):
            tr = Dataset(train.features[fold_of != k], train.response[fold_of != k])
            va = fold_of == k
            model = fit_method("DNN", tr, cfg, seed)
            err += float(np.sum((model.predict(train.features[va]) - train.response[va]) ** 2))
        cv.append(err / n)
    best = int(np.argmin(cv))
    dnn_model = fit_method("DNN", train, cfgs[best], seed)
    dnn_seconds = time.perf_counter() - t0
    logger.info("speed: DPS %.1fs, DNN %.1fs, %d epochs per network", dps_seconds, dnn_seconds, epochs)
    return SpeedResult(
        dps_seconds,
        dnn_seconds,
        mspe(dps_model.predict(test.features), test.response),
        mspe(dnn_model.predict(test.features), test.response),
        report.candidates[report.winner].spec,
        dnn_widths[best],
        [c.spec.num_parameters() for c in report.candidates],
        [init_dnn(2, (M,)).num_parameters() for M in dnn_widths],
    )


# ---------------------------------------------------------------------------
# lifetime surrogate


@dataclass
class LifetimeResult:
    dps_mspe: float
    dpsg_mspe: float
    coverage: float
    t_grid: np.ndarray
    model: DpsModel
    gp: object


def lifetime_features(model: DpsModel, X) -> np.ndarray:
    """Inputs of the GP head: the squashed outputs feeding the last spline layer.

    After tuning, the last spline layer's neurons are proportional to one
    another (only their output-weighted sum is identified), so the GP takes
    over that layer together with the output layer.
    """
    return forward(model, X)[1].squashed[-1]


def eta_moments(mean_log, var_log):
    """Point estimate and delta-method variance of ``eta`` from its log."""
    eta = np.exp(mean_log)
    return eta, eta**2 * var_log


def run_lifetime(train_n: int = 300, test_n: int = 150, cfg: MethodConfig | None = None, seed: int = 0, t_grid=None, level: float = 0.95) -> LifetimeResult:
    """DPS and DPS-G surrogates of log-lifetime on space-filling designs.

    DPS-G freezes the tuned network below the last spline layer and puts a GP
    on :func:`lifetime_features`.  Coverage is the fraction of (test point,
    time) pairs whose true survival lies in the delta-method band.
    """
    from .gp import delta_band, survival

    cfg = cfg or MethodConfig(spline_layers=1, neurons=20, knots=10, budget=TuningBudget(warmup_epochs=2000, max_cycles=10, refine_epochs=100))
    sim = SimSpec("lifetime", None, train_n, test_n, noise_fraction=0.0, seed=seed, design="spacefilling")
    train, test = generate(sim)
    model = fit_method("DPS", train, cfg, replicate_seed(seed, 3))
    dps_pred = model.predict(test.features)
    gp = fit_gp_head(lifetime_features(model, train.features), train.response)
    mean_log, var_log = gp_predict(gp, lifetime_features(model, test.features))
    beta = LIFETIME_CONSTANTS["beta"]
    t = np.linspace(0.0, 200.0, 41) if t_grid is None else np.asarray(t_grid, dtype=float)
    eta_hat, eta_var = eta_moments(mean_log, var_log)
    hits = 0
    for e, v, true_log in zip(eta_hat, eta_var, test.response):
        _, lo, hi = delta_band(float(e), float(v), beta, t, level)
        S_true = survival(t, math.exp(true_log), beta)
        hits += int(np.sum((S_true >= lo) & (S_true <= hi)))
    return LifetimeResult(mspe(dps_pred, test.response), mspe(mean_log, test.response), hits / (t.size * test_n), t, model, gp)


# ---------------------------------------------------------------------------
# approximation demo


def knot_equivalence_demo(target=None, knot_counts=(5, 10, 20, 40), degree: int = 3, grid_size: int = 2001) -> list[dict]:
    """Sup-norm error of least-squares B-spline fits on a dense grid."""
    if target is None:
        target = three_piece_linear
    x = np.linspace(0.0, 1.0, grid_size)
    y = np.asarray(target(x), dtype=float)
    rows = []
    for N in knot_counts:
        B = eval_basis_matrix(make_uniform_knots(N, degree), x)
        coef = linalg.lstsq(B, y)[0]
        rows.append({"knots": int(N), "sup_error": float(np.max(np.abs(B @ coef - y)))})
    return rows


def three_piece_linear(x):
    x = np.asarray(x, dtype=float)
    return np.where(x < 0.3, 2.0 * x, np.where(x < 0.7, 0.6 - (x - 0.3), 0.2 + 1.5 * (x - 0.7)))


# ---------------------------------------------------------------------------
# space-filling design


@njit(cache=True)
def _pair_terms(X, i):
    n, d = X.shape
    out = np.empty(n)
    for j in range(n):
        if j == i:
            out[j] = 0.0
            continue
        p = 1.0
        for k in range(d):
            diff = X[i, k] - X[j, k]
            p *= diff * diff
        out[j] = 1.0 / p if p > 0 else np.inf
    return out


@njit(cache=True)
def _swap_delta(X, i, j, k):
    # change of the criterion when X[i, k] and X[j, k] are exchanged
    before = np.sum(_pair_terms(X, i)) + np.sum(_pair_terms(X, j)) - _pair_terms(X, i)[j]
    t = X[i, k]
    X[i, k] = X[j, k]
    X[j, k] = t
    after = np.sum(_pair_terms(X, i)) + np.sum(_pair_terms(X, j)) - _pair_terms(X, i)[j]
    X[j, k] = X[i, k]
    X[i, k] = t
    return after - before


@njit(cache=True)
def _swap_deltas(X, i, k):
    n = X.shape[0]
    out = np.zeros(n)
    for j in range(n):
        if j != i:
            out[j] = _swap_delta(X, i, j, k)
    return out


def maxpro_criterion(X) -> float:
    """``sum_{i<j} prod_k (x_ik - x_jk)^-2``."""
    X = np.asarray(X, dtype=float)
    return float(sum(np.sum(_pair_terms(X, i)[i + 1 :]) for i in range(X.shape[0])))


def latin_hypercube(n: int, d: int, rng) -> np.ndarray:
    """One point per ``1/n`` slab in every column, uniformly placed within its slab."""
    X = np.empty((n, d))
    for k in range(d):
        X[:, k] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return X


def _exchange_descent(X, iterations):
    n, d = X.shape
    crit = maxpro_criterion(X)
    history = [crit]
    visits = [(i, k) for k in range(d) for i in range(n)]
    idle = 0
    for it in range(iterations):
        i, k = visits[it % len(visits)]
        deltas = _swap_deltas(X, i, k)
        j = int(np.argmin(deltas))
        if deltas[j] < 0:
            X[i, k], X[j, k] = X[j, k], X[i, k]
            crit += float(deltas[j])
            history.append(crit)
            idle = 0
        else:
            idle += 1
            if idle >= len(visits):
                break
    return X, maxpro_criterion(X), history


def spacefilling_design(n: int, d: int, iterations: int = 200, seed: int = 0, restarts: int = 4, return_history: bool = False):
    """Latin hypercube improved by pairwise coordinate exchanges.

    Each iteration visits one (row, column) pair in a fixed cyclic order and
    applies the exchange with another row that lowers the criterion most,
    stopping early after a full pass without change.  Exchanges keep every
    column's values, so the design stays a Latin hypercube.  Further
    ``restarts`` re-pair the same column values at random and descend again;
    the best design is returned, and the history holds the best criterion so
    far after every accepted exchange.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if d < 1:
        raise ValueError("d must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    X0 = latin_hypercube(n, d, rng)
    best, best_crit, history = None, np.inf, []
    for r in range(restarts):
        X = X0.copy()
        if r > 0:
            for k in range(1, d):
                X[:, k] = X[rng.permutation(n), k]
        X, crit, h = _exchange_descent(X, iterations)
        for c in h:
            history.append(min(c, history[-1]) if history else c)
        if crit < best_crit:
            best, best_crit = X, crit
    return (best, np.array(history)) if return_history else best
