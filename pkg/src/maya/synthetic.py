"""Synthetic tables with a known generating rule, for smoke runs and tests."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Tuple

import numpy as np

from .data import Schema


def linear_classification(n: int = 500, n_features: int = 4, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels from the sign of a fixed linear score; returns (X, y, w)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, n_features))
    w = rng.normal(size=n_features)
    y = (x @ w > 0).astype(np.int64)
    return x, y, w


def linear_regression(n: int = 1000, noise: float = 0.1, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """``y = 3 x1 - 2 x2 + noise``; the Bayes RMSE equals ``noise``.

    Features are uniform with unit variance. Bounded support keeps the
    quantile clamp at the training range from adding error on held-out rows.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(n, 2))
    return x, 3.0 * x[:, 0] - 2.0 * x[:, 1] + rng.normal(scale=noise, size=n)


def write_table(directory, x: np.ndarray, y: np.ndarray, task: str, num_classes: int = 0,
                name: str = "table") -> Tuple[Path, Path]:
    """Write ``<name>.csv`` and ``<name>.schema``; returns both paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cols = [f"x{i}" for i in range(x.shape[1])]
    csv_path, schema_path = d / f"{name}.csv", d / f"{name}.schema"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["target"])
        for row, t in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t)) if task == "regression" else int(t)])
    kinds = {c: "numerical" for c in cols}
    kinds["target"] = "target"
    schema = Schema(cols + ["target"], kinds, task, num_classes)
    schema_path.write_text(schema.to_text(), encoding="utf-8")
    return csv_path, schema_path
