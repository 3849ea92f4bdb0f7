"""Regenerate the frozen golden model used by the test suite.

Run only when the model file format changes on purpose:
    python3 scripts/make_golden.py
"""

from pathlib import Path

import numpy as np

from dps import Dataset, NetworkSpec, TrainOptions, fit, init_model, serialize

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def main():
    rng = np.random.default_rng(7)
    X = rng.uniform(0, 1, (40, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    spec = NetworkSpec(2, (4, 3, 3, 1), (6, 5), seed=11)
    model = init_model(spec).standardized(X).with_lambdas([0.5, 2.0])
    model, _ = fit(model, Dataset(X, y), TrainOptions(max_epochs=30))
    OUT.mkdir(exist_ok=True)
    (OUT / "model.json").write_bytes(serialize(model))
    Xq = np.linspace(0, 1, 11)[:, None] * np.array([1.0, 0.5])
    pred = model.predict(Xq)
    np.savetxt(OUT / "queries.txt", Xq, fmt="%.17g")
    np.savetxt(OUT / "predictions.txt", pred, fmt="%.17g")


if __name__ == "__main__":
    main()
