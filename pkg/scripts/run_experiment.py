"""Run one simulation study at the scale used by the acceptance suite.

    python3 scripts/run_experiment.py example1 --out results/example1
    python3 scripts/run_experiment.py double-descent --replicates 5
    python3 scripts/run_experiment.py dimension-scaling
    python3 scripts/run_experiment.py speed
    python3 scripts/run_experiment.py lifetime
    python3 scripts/run_experiment.py knots

Tables are written as CSV under ``--out`` (default ``results/<name>``) and a
short summary is printed.  ``--jobs`` spreads replicates over processes.
"""

import argparse
import csv
import json
import logging
import time
from pathlib import Path

from dps import bench
from dps.select import TuningBudget

# Budgets sized for a single CPU core; see README for the timings.
EXAMPLE1 = bench.MethodConfig(budget=TuningBudget(warmup_epochs=1500, max_cycles=10, refine_epochs=100))
DOUBLE_DESCENT = bench.MethodConfig(budget=TuningBudget(warmup_epochs=1500, max_cycles=10, refine_epochs=100))
SCALING = bench.MethodConfig(budget=TuningBudget(warmup_epochs=1500, max_cycles=10, refine_epochs=100))
SPEED = TuningBudget(warmup_epochs=1500, max_cycles=10, refine_epochs=100)


def write_rows(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("experiment", choices=["example1", "double-descent", "dimension-scaling", "speed", "lifetime", "knots"])
    parser.add_argument("--out", type=Path)
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    out = args.out or Path("results") / args.experiment
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    exp = args.experiment

    if exp == "example1":
        res = bench.run_example1(args.replicates or 20, (400,), ("DPS", "DS"), EXAMPLE1, args.seed, jobs=args.jobs)
        res.write(out / "raw.csv", out / "aggregate.csv")
        summary = {m: res.mean(m) for m in ("DPS", "DS")}
    elif exp == "double-descent":
        res = bench.run_double_descent(replicates=args.replicates or 5, cfg=DOUBLE_DESCENT, seed=args.seed, jobs=args.jobs)
        res.write(out / "raw.csv", out / "aggregate.csv")
        summary = {m: bench.sweep_ratio(res, m) for m in ("DPS", "DS")}
    elif exp == "dimension-scaling":
        res = bench.run_dimension_scaling(sizes=(800, 1600), replicates=args.replicates or 3, methods=("DPS",), cfg=SCALING, seed=args.seed, jobs=args.jobs)
        res.write(out / "raw.csv", out / "aggregate.csv")
        ratios = bench.scaling_ratios(res)
        write_rows(out / "ratios.csv", ratios)
        summary = {f"d={r['d']}": r["ratio"] for r in ratios}
    elif exp == "speed":
        r = bench.run_tuning_speed(budget=SPEED, seed=args.seed)
        summary = {"dps_seconds": r.dps_seconds, "dnn_seconds": r.dnn_seconds, "ratio": r.ratio, "dps_mspe": r.dps_mspe, "dnn_mspe": r.dnn_mspe}
        write_rows(out / "speed.csv", [summary])
    elif exp == "lifetime":
        r = bench.run_lifetime(seed=args.seed)
        summary = {"dps_mspe": r.dps_mspe, "dpsg_mspe": r.dpsg_mspe, "coverage": r.coverage}
        write_rows(out / "lifetime.csv", [summary])
    else:
        rows = bench.knot_equivalence_demo(knot_counts=(5, 10, 20, 40, 80))
        write_rows(out / "knots.csv", rows)
        summary = {str(r["knots"]): r["sup_error"] for r in rows}

    print(json.dumps({"experiment": exp, "seconds": round(time.perf_counter() - t0, 1), **summary}, indent=2))


if __name__ == "__main__":
    main()
