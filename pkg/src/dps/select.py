"""Generalised cross-validation and exhaustive structure search."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .data import Dataset
from .ecm import EcmOptions, ecm_tune
from .model import DpsModel, NetworkSpec, forward, init_model
from .train import TrainOptions, fit, one_hot

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateGrid:
    """Cartesian grid of structures; ``layer_options`` counts spline layers."""

    neuron_options: tuple[int, ...]
    knot_options: tuple[int, ...]
    layer_options: tuple[int, ...]
    degree: int = 3
    penalty_order: int = 2

    def __post_init__(self):
        for name in ("neuron_options", "knot_options", "layer_options"):
            vals = tuple(sorted(set(int(v) for v in getattr(self, name))))
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, vals)
        if min(self.layer_options) < 1:
            raise ValueError("layer_options entries must be >= 1")
        # every implied structure must be valid
        for _ in self.specs(1):
            pass

    def specs(self, input_dim: int, num_classes: int | None = None, seed: int = 0) -> list[NetworkSpec]:
        """Candidate structures in grid order (layers, neurons, knots)."""
        out = []
        head = (num_classes,) if num_classes else (1,)
        kind = "softmax" if num_classes else "identity"
        for L, p, N in itertools.product(self.layer_options, self.neuron_options, self.knot_options):
            out.append(
                NetworkSpec(
                    input_dim,
                    (p,) * (L + 1) + head,
                    (N,) * L,
                    degree=self.degree,
                    penalty_order=self.penalty_order,
                    output_kind=kind,
                    seed=seed,
                )
            )
        return out


@dataclass(frozen=True)
class TuningBudget:
    """Work spent on every candidate: gradient warm-up, then ECM cycles."""

    warmup_epochs: int = 1500
    max_cycles: int = 10
    refine_epochs: int = 100
    tol: float = 1e-4
    seed: int = 0


@dataclass
class CandidateResult:
    spec: NetworkSpec
    gcv: float
    df: float
    seconds: float
    lambdas: tuple[float, ...] = ()
    error: str | None = None


@dataclass
class SelectionReport:
    candidates: list[CandidateResult]
    winner: int
    models: list[DpsModel | None] = field(default_factory=list, repr=False)

    @property
    def best(self) -> CandidateResult:
        return self.candidates[self.winner]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "layers", "neurons", "knots", "degree", "penalty_order", "num_parameters", "lambdas", "gcv", "df", "seconds", "winner", "error"])
            for i, c in enumerate(self.candidates):
                s = c.spec
                w.writerow(
                    [
                        i,
                        s.num_spline_layers,
                        s.neurons[0],
                        s.knots_per_layer[0],
                        s.degree,
                        s.penalty_order,
                        s.num_parameters(),
                        ";".join(format(v, ".17g") for v in c.lambdas),
                        format(c.gcv, ".17g"),
                        format(c.df, ".17g"),
                        format(c.seconds, ".3f"),
                        int(i == self.winner),
                        c.error or "",
                    ]
                )


def effective_df(H) -> float:
    """Numerical rank of ``H`` (trace of its column-space projection).

    Column-pivoted QR; diagonal entries of ``R`` above ``n * eps * sigma_max``
    count.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.size == 0:
        return 0.0
    smax = float(linalg.norm(H, 2))
    if smax == 0:
        return 0.0
    R = linalg.qr(H, mode="r", pivoting=True)[0]
    tol = H.shape[0] * np.finfo(float).eps * smax
    return float(np.sum(np.abs(np.diag(R)) > tol))


def gcv_value(rss: float, n: int, df: float) -> float:
    """``rss / (n - df)^2``, or ``+inf`` when ``n <= df``."""
    if n <= df:
        return float("inf")
    return float(rss) / (n - df) ** 2


def pearson_chi2(P: np.ndarray, labels) -> float:
    Y = one_hot(labels, P.shape[1])
    P = np.maximum(P, 1e-12)
    return float(np.sum((Y - P) ** 2 / P))


def gcv_score(model: DpsModel, data: Dataset, mode: str | None = None) -> tuple[float, float]:
    """``(gcv, df)`` with df from the last hidden layer plus intercept.

    Regression uses the residual sum of squares; classification replaces it
    with Pearson's chi-square.
    """
    mode = mode or ("classification" if model.spec.output_kind == "softmax" else "regression")
    out, cache = forward(model, data.features)
    H = np.column_stack([np.ones(data.n), cache.last_hidden])
    df = effective_df(H)
    if mode == "regression":
        num = float(np.sum((np.asarray(data.response, dtype=float) - out) ** 2))
    elif mode == "classification":
        num = pearson_chi2(out, data.response)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return gcv_value(num, data.n, df), df


def tune_candidate(spec: NetworkSpec, data: Dataset, budget: TuningBudget) -> DpsModel:
    """Warm-up descent followed by ECM tuning, from the spec's seeded start."""
    model = init_model(spec).standardized(data.features)
    model, _ = fit(model, data, TrainOptions(max_epochs=budget.warmup_epochs))
    model, _, _ = ecm_tune(model, data, options=EcmOptions(max_cycles=budget.max_cycles, tol=budget.tol, refine_epochs=budget.refine_epochs))
    return model


def _evaluate(args):
    spec, data, budget = args
    t0 = time.perf_counter()
    try:
        model = tune_candidate(spec, data, budget)
        gcv, df = gcv_score(model, data)
        return CandidateResult(spec, gcv, df, time.perf_counter() - t0, tuple(float(v) for v in model.lambdas)), model
    except Exception as exc:  # a failed candidate is recorded, never fatal
        logger.warning("candidate %s failed: %s", spec, exc)
        return CandidateResult(spec, float("inf"), float("nan"), time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}"), None


def pick_winner(candidates: list[CandidateResult]) -> int:
    """Smallest GCV; ties go to fewer parameters, then to the earlier candidate."""
    keys = [(c.gcv, c.spec.num_parameters(), i) for i, c in enumerate(candidates)]
    return min(keys)[2]


def structure_search(grid: CandidateGrid, data: Dataset, budget: TuningBudget | None = None, jobs: int = 1) -> SelectionReport:
    """Tune every candidate with the same budget and keep the GCV minimiser."""
    budget = budget or TuningBudget()
    classes = int(data.response.max()) + 1 if data.is_classification else None
    specs = grid.specs(data.d, classes, seed=budget.seed)
    work = [(s, data, budget) for s in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate, work))
    else:
        results = [_evaluate(w) for w in work]
    candidates = [r[0] for r in results]
    return SelectionReport(candidates, pick_winner(candidates), [r[1] for r in results])
