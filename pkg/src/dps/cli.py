"""Command-line interface: ``dps <command> [options]``.

Every command resolves its parameters from built-in defaults, then an
optional JSON config (``--config``), then command-line flags, validates them,
and writes its artifacts plus ``manifest.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .data import DataError, Dataset, load_csv, save_csv
from .ecm import EcmOptions, ecm_tune
from .gp import GpPosterior, delta_band, fit_gp_head, gp_predict, save_band
from .model import NetworkSpec, deserialize, forward, init_model, serialize
from .select import CandidateGrid, TuningBudget, structure_search
from .train import TrainOptions, fit

logger = logging.getLogger("dps")

CONFIG_VERSION = "1"

_NETWORK = {"layers": 2, "neurons": 50, "knots": 15, "degree": 3, "penalty_order": 2}
_TUNING = {"warmup_epochs": 1500, "max_cycles": 10, "refine_epochs": 100, "tol": 1e-4}

DEFAULTS: dict[str, dict] = {
    "simulate": {"seed": 0, "fn": "example1", "dim": None, "train_n": 400, "test_n": 2000, "noise_fraction": 0.05, "design": "uniform"},
    "train": {"seed": 0, **_NETWORK, "lambda": 1.0, "epochs": 5000, "learning_rate": 1e-2, "target": "y", "classification": False},
    "tune": {"seed": 0, **_NETWORK, **_TUNING, "target": "y", "classification": False},
    "select": {"seed": 0, "neurons": [50], "knots": [15], "layers": [2], "degree": 3, "penalty_order": 2, **_TUNING, "target": "y", "classification": False},
    "predict": {"target": "y", "classification": False},
    "bench": {
        "seed": 0,
        "experiment": "example1",
        "replicates": 3,
        "sizes": [200, 400, 800],
        "knot_sweep": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        "dims": [2, 6, 10],
        "train_n": 800,
        "test_n": 2000,
        "methods": None,
        **_NETWORK,
        **_TUNING,
    },
    "gp-fit": {"target": "y"},
    "band": {"beta": 2.0, "t_max": 200.0, "t_points": 41, "level": 0.95, "eta": None, "eta_var": None, "row": 0},
}

EXPERIMENTS = ("example1", "double-descent", "dimension-scaling", "knots", "lifetime")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _check_type(key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value) or not value:
            raise ConfigError(f"{key}: expected a nonempty list of integers, got {value!r}")
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def resolve_config(command: str, config_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON config file, then explicit overrides."""
    cfg = dict(DEFAULTS[command])
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        version = loaded.pop("format_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"{config_path}: unsupported format_version {version!r}")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"{config_path}: unknown key(s) for {command}: {', '.join(unknown)}")
        for k, v in loaded.items():
            cfg[k] = _check_type(k, v, DEFAULTS[command][k])
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in cfg:
                raise ConfigError(f"option {k} does not apply to {command}")
            cfg[k] = v
    _validate(command, cfg)
    return cfg


def _validate(command: str, cfg: dict) -> None:
    def positive(*keys):
        for k in keys:
            if k in cfg and cfg[k] is not None and not cfg[k] > 0:
                raise ConfigError(f"{k} must be positive, got {cfg[k]}")

    positive("train_n", "test_n", "epochs", "learning_rate", "replicates", "max_cycles", "t_max", "t_points", "beta")
    for k in ("warmup_epochs", "refine_epochs"):
        if k in cfg and cfg[k] < 0:
            raise ConfigError(f"{k} must be non-negative")
    if "seed" in cfg and not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if "lambda" in cfg and not cfg["lambda"] >= 0:
        raise ConfigError(f"lambda must be non-negative, got {cfg['lambda']}")
    try:
        if command == "simulate":
            bench.SimSpec(cfg["fn"], cfg["dim"], cfg["train_n"], cfg["test_n"], cfg["noise_fraction"], 0, cfg["design"])
        if command in ("train", "tune", "bench"):
            NetworkSpec.regression(1, cfg["layers"], cfg["neurons"], cfg["knots"], degree=cfg["degree"], penalty_order=cfg["penalty_order"])
        if command == "select":
            CandidateGrid(tuple(cfg["neurons"]), tuple(cfg["knots"]), tuple(cfg["layers"]), cfg["degree"], cfg["penalty_order"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if command == "bench" and cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg['experiment']!r}; choose from {', '.join(EXPERIMENTS)}")
    if command == "band" and not 0 < cfg["level"] < 1:
        raise ConfigError("level must lie in (0, 1)")


def config_hash(command: str, cfg: dict, inputs: dict) -> str:
    payload = json.dumps({"command": command, "config": cfg, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


# ---------------------------------------------------------------------------
# helpers


def _load(path, cfg) -> Dataset:
    if path is None:
        raise ConfigError("--data is required")
    return load_csv(path, target=cfg.get("target", "y"), classification=cfg.get("classification", False))


def _spec(cfg, data: Dataset, layers=None, neurons=None, knots=None) -> NetworkSpec:
    layers = cfg["layers"] if layers is None else layers
    neurons = cfg["neurons"] if neurons is None else neurons
    knots = cfg["knots"] if knots is None else knots
    if data.is_classification:
        classes = int(data.response.max()) + 1
        return NetworkSpec(data.d, (neurons,) * (layers + 1) + (classes,), (knots,) * layers, cfg["degree"], cfg["penalty_order"], "softmax", cfg["seed"])
    return NetworkSpec.regression(data.d, layers, neurons, knots, degree=cfg["degree"], penalty_order=cfg["penalty_order"], seed=cfg["seed"])


def _write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(float(v), ".17g") if isinstance(v, (float, np.floating)) else v for v in row])


def _save_model(model, path) -> None:
    Path(path).write_bytes(serialize(model))


def _load_model(path):
    if path is None:
        raise ConfigError("--model is required")
    return deserialize(Path(path).read_bytes())


def write_svg(path, series: dict, xlabel: str, ylabel: str, logy: bool = False) -> None:
    """Minimal line plot: ``series`` maps a label to ``(x, y)`` sequences."""
    W, H, m = 640, 400, 50
    pts = {k: (np.asarray(x, float), np.log10(np.asarray(y, float)) if logy else np.asarray(y, float)) for k, (x, y) in series.items()}
    xs = np.concatenate([p[0] for p in pts.values()])
    ys = np.concatenate([p[1] for p in pts.values()])
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return m + (x - x0) / (x1 - x0) * (W - 2 * m)

    def py(y):
        return H - m - (y - y0) / (y1 - y0) * (H - 2 * m)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">']
    out.append(f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{H - 2 * m}" fill="none" stroke="black"/>')
    out.append(f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">{("log10 " if logy else "") + ylabel}</text>')
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{px(v):.1f}" y="{H - m + 15}" text-anchor="{anchor}">{v:.4g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{m - 5}" y="{py(v):.1f}" text-anchor="end">{v:.3g}</text>')
    for idx, (label, (x, y)) in enumerate(pts.items()):
        c = colors[idx % len(colors)]
        points = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
        out.append(f'<polyline points="{points}" fill="none" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - m - 5}" y="{m + 15 + 15 * idx}" text-anchor="end" fill="{c}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def gp_to_json(gp: GpPosterior, y) -> bytes:
    tree = {
        "format_version": CONFIG_VERSION,
        "lengthscale": format(gp.lengthscale, ".17g"),
        "signal_var": format(gp.signal_var, ".17g"),
        "nugget": format(gp.nugget, ".17g"),
        "mean": format(gp.mean, ".17g"),
        "Z": [[format(float(v), ".17g") for v in row] for row in gp.Z],
        "y": [format(float(v), ".17g") for v in y],
    }
    return (json.dumps(tree, indent=1) + "\n").encode()


def gp_from_json(payload) -> GpPosterior:
    from scipy import linalg

    from .gp import se_kernel

    tree = json.loads(payload)
    if tree.get("format_version") != CONFIG_VERSION:
        raise ConfigError("unsupported GP file version")
    Z = np.array([[float(v) for v in row] for row in tree["Z"]])
    y = np.array([float(v) for v in tree["y"]])
    ell, sv, nug, mu = (float(tree[k]) for k in ("lengthscale", "signal_var", "nugget", "mean"))
    Lf = linalg.cholesky(se_kernel(Z, Z, ell, sv) + nug * np.eye(y.size), lower=True)
    alpha = linalg.cho_solve((Lf, True), y - mu)
    return GpPosterior(ell, sv, nug, Z, Lf, alpha, mu, float("nan"))


# ---------------------------------------------------------------------------
# commands; each returns the list of files written


def cmd_simulate(cfg, args, out: Path):
    spec = bench.SimSpec(cfg["fn"], cfg["dim"], cfg["train_n"], cfg["test_n"], cfg["noise_fraction"], cfg["seed"], cfg["design"])
    train, test = bench.generate(spec)
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    return ["train.csv", "test.csv"]


def cmd_train(cfg, args, out: Path):
    data = _load(args.data, cfg)
    model = init_model(_spec(cfg, data)).standardized(data.features)
    model = model.with_lambdas(np.full(cfg["layers"], cfg["lambda"]))
    model, traj = fit(model, data, TrainOptions(learning_rate=cfg["learning_rate"], max_epochs=cfg["epochs"]))
    _save_model(model, out / "model.json")
    _write_csv(out / "trajectory.csv", ["epoch", "objective"], [(i, v) for i, v in enumerate(traj)])
    return ["model.json", "trajectory.csv"]


def cmd_tune(cfg, args, out: Path):
    data = _load(args.data, cfg)
    if args.model:
        model = _load_model(args.model)
    else:
        model = init_model(_spec(cfg, data)).standardized(data.features)
        model, _ = fit(model, data, TrainOptions(max_epochs=cfg["warmup_epochs"]))
    opts = EcmOptions(max_cycles=cfg["max_cycles"], tol=cfg["tol"], refine_epochs=cfg["refine_epochs"])
    model, state, traj = ecm_tune(model, data, options=opts)
    _save_model(model, out / "model.json")
    k = model.spec.num_spline_layers
    header = ["cycle", "objective", *[f"lambda{s + 1}" for s in range(k)], *[f"sigma2_{s + 1}" for s in range(k)], *[f"xi2_{s + 1}" for s in range(k)]]
    _write_csv(out / "ecm_trajectory.csv", header, [(r.cycle, r.objective, *r.model_lambdas, *r.sigma2, *r.xi2) for r in traj])
    return ["model.json", "ecm_trajectory.csv"]


def cmd_select(cfg, args, out: Path):
    data = _load(args.data, cfg)
    grid = CandidateGrid(tuple(cfg["neurons"]), tuple(cfg["knots"]), tuple(cfg["layers"]), cfg["degree"], cfg["penalty_order"])
    budget = TuningBudget(cfg["warmup_epochs"], cfg["max_cycles"], cfg["refine_epochs"], cfg["tol"], cfg["seed"])
    report = structure_search(grid, data, budget, jobs=args.jobs)
    report.to_csv(out / "selection.csv")
    files = ["selection.csv"]
    if report.models[report.winner] is not None:
        _save_model(report.models[report.winner], out / "model.json")
        files.append("model.json")
    return files


def cmd_predict(cfg, args, out: Path):
    model = _load_model(args.model)
    X = _features(args.data, cfg, model.spec.input_dim)
    pred, _ = forward(model, X)
    if pred.ndim == 2:
        header = [f"p{c}" for c in range(pred.shape[1])]
        rows = [tuple(r) for r in pred]
    else:
        header = ["prediction"]
        rows = [(v,) for v in pred]
    _write_csv(out / "predictions.csv", header, rows)
    return ["predictions.csv"]


def _features(path, cfg, d):
    """Feature matrix from a CSV with or without the response column."""
    if path is None:
        raise ConfigError("--data is required")
    with Path(path).open() as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise DataError(f"{path}: empty file")
    if cfg["target"] in [h.strip() for h in header]:
        return _load(path, cfg).features
    # no response column: append a dummy one for the strict reader
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    tmp = [row + ["0"] for row in rows[1:] if row]
    arr = np.array([[float(v) for v in row] for row in tmp]) if tmp else np.zeros((0, d + 1))
    X = arr[:, :-1]
    if X.shape[1] != d:
        raise DataError(f"{path}: {X.shape[1]} feature columns, model expects {d}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite feature values")
    return X


def cmd_bench(cfg, args, out: Path):
    budget = TuningBudget(cfg["warmup_epochs"], cfg["max_cycles"], cfg["refine_epochs"], cfg["tol"], cfg["seed"])
    mc = bench.MethodConfig(cfg["layers"], cfg["neurons"], cfg["knots"], budget, dnn_hidden=(cfg["neurons"],) * cfg["layers"])
    exp = cfg["experiment"]
    methods = cfg["methods"]
    if exp == "knots":
        rows = bench.knot_equivalence_demo(knot_counts=cfg["knot_sweep"])
        _write_csv(out / "knots.csv", ["knots", "sup_error"], [(r["knots"], r["sup_error"]) for r in rows])
        write_svg(out / "knots.svg", {"sup error": ([r["knots"] for r in rows], [max(r["sup_error"], 1e-300) for r in rows])}, "knots", "sup error", logy=True)
        return ["knots.csv", "knots.svg"]
    if exp == "lifetime":
        res = bench.run_lifetime(seed=cfg["seed"])
        _write_csv(out / "lifetime.csv", ["method", "mspe", "coverage"], [("DPS", res.dps_mspe, ""), ("DPS-G", res.dpsg_mspe, res.coverage)])
        return ["lifetime.csv"]
    if exp == "example1":
        res = bench.run_example1(cfg["replicates"], tuple(cfg["sizes"]), tuple(methods or ("DPS", "DS", "DNN")), mc, cfg["seed"], cfg["test_n"], args.jobs)
    elif exp == "double-descent":
        res = bench.run_double_descent(tuple(cfg["knot_sweep"]), cfg["train_n"], cfg["replicates"], tuple(methods or ("DPS", "DS")), mc, "example1", cfg["seed"], cfg["test_n"], args.jobs)
    else:
        res = bench.run_dimension_scaling(tuple(cfg["dims"]), tuple(cfg["sizes"]), cfg["replicates"], tuple(methods or ("DPS", "DS")), mc, cfg["seed"], cfg["test_n"], args.jobs)
    res.write(out / "raw.csv", out / "aggregate.csv")
    files = ["raw.csv", "aggregate.csv"]
    agg = res.aggregate()
    if exp == "double-descent":
        series = {}
        for r in agg:
            series.setdefault(r["method"], ([], []))
            series[r["method"]][0].append(r["knots"])
            series[r["method"]][1].append(r["mean"])
        write_svg(out / "curve.svg", series, "knots", "mean MSPE", logy=True)
        files.append("curve.svg")
    if exp == "dimension-scaling":
        ratios = bench.scaling_ratios(res)
        _write_csv(out / "ratios.csv", ["method", "d", "n_small", "n_large", "ratio"], [tuple(r.values()) for r in ratios])
        files.append("ratios.csv")
    return files


def cmd_gp_fit(cfg, args, out: Path):
    model = _load_model(args.model)
    data = _load(args.data, cfg)
    gp = fit_gp_head(bench.lifetime_features(model, data.features), data.response)
    (out / "gp.json").write_bytes(gp_to_json(gp, data.response))
    _write_csv(out / "gp_hyper.csv", ["lengthscale", "signal_var", "nugget", "log_marginal"], [(gp.lengthscale, gp.signal_var, gp.nugget, gp.log_marginal)])
    return ["gp.json", "gp_hyper.csv"]


def cmd_band(cfg, args, out: Path):
    if cfg["eta"] is not None:
        eta, eta_var = float(cfg["eta"]), float(cfg["eta_var"] or 0.0)
    else:
        if args.gp is None:
            raise ConfigError("band needs --eta (and --eta-var) or --model, --gp and --data")
        model = _load_model(args.model)
        gp = gp_from_json(Path(args.gp).read_bytes())
        X = _features(args.data, {"target": "y", "classification": False}, model.spec.input_dim)
        if not 0 <= cfg["row"] < X.shape[0]:
            raise ConfigError(f"row {cfg['row']} out of range")
        m, v = gp_predict(gp, bench.lifetime_features(model, X[cfg["row"] : cfg["row"] + 1]))
        e, ev = bench.eta_moments(m, v)
        eta, eta_var = float(e[0]), float(ev[0])
    t = np.linspace(0.0, cfg["t_max"], cfg["t_points"])
    S, lo, hi = delta_band(eta, eta_var, cfg["beta"], t, cfg["level"])
    save_band(out / "band.csv", t, S, lo, hi)
    return ["band.csv"]


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "tune": cmd_tune,
    "select": cmd_select,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "gp-fit": cmd_gp_fit,
    "band": cmd_band,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dps", description="Deep P-spline networks: simulate, train, tune, select, predict, benchmark.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model=False):
        p.add_argument("--config", type=Path, help="JSON file with parameters for this command")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        if data:
            p.add_argument("--data", type=Path, help="CSV with a header row")
        p.add_argument("--model", type=Path, help="model file" + ("" if model else " (optional)"))
        if "seed" in DEFAULTS[p.prog.split()[-1]]:
            p.add_argument("--seed", type=int)
        return p

    def network(p, lists=False):
        kind = _int_list if lists else int
        p.add_argument("--layers", type=kind, help="spline layers" + (" (comma list)" if lists else ""))
        p.add_argument("--neurons", type=kind, help="neurons per layer" + (" (comma list)" if lists else ""))
        p.add_argument("--knots", type=kind, help="basis functions per spline layer" + (" (comma list)" if lists else ""))

    def target(p):
        p.add_argument("--target", help="response column name (default y)")
        p.add_argument("--classification", action="store_const", const=True, help="integer class labels, softmax head")

    p = common(sub.add_parser("simulate", help="generate a benchmark data set"), data=False)
    p.add_argument("--fn", help=f"one of {', '.join(bench.FUNCTION_IDS)}")
    p.add_argument("--dim", type=int, help="input dimension (g1, g2)")
    p.add_argument("--train-n", dest="train_n", type=int)
    p.add_argument("--test-n", dest="test_n", type=int)
    p.add_argument("--design", help="uniform or spacefilling")

    p = common(sub.add_parser("train", help="gradient descent at fixed penalties"))
    network(p)
    target(p)
    p.add_argument("--lambda", dest="lambda_", type=float, help="penalty for every spline layer")
    p.add_argument("--epochs", type=int)

    p = common(sub.add_parser("tune", help="ECM tuning of penalties and weights"))
    network(p)
    target(p)
    p.add_argument("--max-cycles", dest="max_cycles", type=int)

    p = common(sub.add_parser("select", help="GCV structure search"))
    network(p, lists=True)
    target(p)

    p = common(sub.add_parser("predict", help="predictions of a model"), model=True)
    p.add_argument("--target", help="response column name, if present (default y)")

    p = common(sub.add_parser("bench", help="run a simulation study"), data=False)
    p.add_argument("--experiment", help=f"one of {', '.join(EXPERIMENTS)}")
    p.add_argument("--replicates", type=int)
    network(p)
    p.add_argument("--train-n", dest="train_n", type=int)

    p = common(sub.add_parser("gp-fit", help="GP head on the inputs of a model's last spline layer"), model=True)
    p.add_argument("--target", help="response column name (default y)")

    p = common(sub.add_parser("band", help="delta-method survival band"), model=True)
    p.add_argument("--gp", type=Path, help="GP file from gp-fit")
    p.add_argument("--eta", type=float)
    p.add_argument("--eta-var", dest="eta_var", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--level", type=float)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--row", type=int, help="row of --data to evaluate (default 0)")
    return parser


_OVERRIDE_KEYS = {
    "seed", "fn", "dim", "train_n", "test_n", "design", "layers", "neurons", "knots", "target", "classification",
    "epochs", "max_cycles", "experiment", "replicates", "eta", "eta_var", "beta", "level", "t_max", "row",
}


def _overrides(args) -> dict:
    ov = {k: v for k, v in vars(args).items() if k in _OVERRIDE_KEYS}
    if getattr(args, "lambda_", None) is not None:
        ov["lambda"] = args.lambda_
    return ov


def _inputs(args) -> dict:
    """Digests of input files, so the manifest pins what was read."""
    out = {}
    for key in ("data", "model", "gp", "config"):
        p = getattr(args, key, None)
        if p is not None and Path(p).is_file():
            out[key] = {"path": str(p), "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    manifest = {"command": args.command, "config_hash": None, "seed": None, "started_at": started, "duration_s": None, "outputs": [], "git_describe": _git_describe()}
    code = 0
    try:
        cfg = resolve_config(args.command, args.config, _overrides(args))
        inputs = _inputs(args)
        manifest.update(config=cfg, inputs=inputs, config_hash=config_hash(args.command, cfg, {k: v["sha256"] for k, v in inputs.items() if k != "config"}), seed=cfg.get("seed"))
        manifest["outputs"] = COMMANDS[args.command](cfg, args, out)
    except (ConfigError, DataError, ValueError, OSError, RuntimeError) as exc:
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        print(f"dps {args.command}: error: {exc}", file=sys.stderr)
        code = 2 if isinstance(exc, (ConfigError, DataError)) else 1
    manifest["duration_s"] = round(time.perf_counter() - t0, 3)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
