"""Datasets and strict CSV input/output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    response: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    target_name: str = "y"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.features = X
        y = np.asarray(self.response)
        self.response = y
        if X.shape[0] < 1:
            raise DataError("dataset must contain at least one row")
        if y.shape[0] != X.shape[0]:
            raise DataError(f"response has {y.shape[0]} rows, features have {X.shape[0]}")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain NaN or Inf")
        if y.dtype.kind == "f" and not np.all(np.isfinite(y)):
            raise DataError("response contains NaN or Inf")
        if not self.feature_names:
            self.feature_names = [f"x{j + 1}" for j in range(X.shape[1])]
        if len(self.feature_names) != X.shape[1]:
            raise DataError("one feature name per column required")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.response.dtype.kind in "iu"

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.response[idx], list(self.feature_names), self.target_name)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def save_csv(data: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*data.feature_names, data.target_name])
        for row, y in zip(data.features, data.response):
            w.writerow([*(_fmt(v) for v in row), _fmt(y)])


def load_csv(path, target: str = "y", classification: bool = False) -> Dataset:
    """Read a header-plus-rows CSV; the ``target`` column is the response.

    Ragged rows, non-numeric cells and NaN/Inf values raise :class:`DataError`
    naming the offending line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target not in header:
        raise DataError(f"{path}: no column named {target!r}")
    t = header.index(target)
    width = len(header)
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        parsed = []
        for cell in row:
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite cell {cell!r}")
            parsed.append(v)
        values.append(parsed)
    if not values:
        raise DataError(f"{path}: no data rows")
    arr = np.array(values)
    y = arr[:, t]
    X = np.delete(arr, t, axis=1)
    names = [h for j, h in enumerate(header) if j != t]
    if classification:
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise DataError(f"{path}: class labels must be non-negative integers")
        y = y.astype(np.int64)
    return Dataset(X, y, names, target)
