"""Seeded Gaussian-blob data standing in for flow records in tests and demos."""

from __future__ import annotations

import csv
import json

import numpy as np

from .datapipe import Dataset
from .numkernel import make_rng


def make_blobs(
    n: int,
    steps: int,
    n_classes: int = 6,
    seed: int = 0,
    spread: float = 0.3,
    weights=None,
) -> Dataset:
    """Draw ``n`` rows of ``steps`` features from one isotropic Gaussian per class.

    Class centres are uniform in ``[0, 1]^steps``; ``spread`` is the
    per-feature standard deviation.  ``weights`` gives class proportions
    (uniform by default); each class gets at least one row.
    """
    rng = make_rng(seed)
    centres = rng.uniform(0.0, 1.0, size=(n_classes, steps))
    if weights is None:
        weights = np.full(n_classes, 1.0 / n_classes)
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    counts = np.maximum(1, np.floor(weights * n).astype(int))
    counts[np.argmax(counts)] += n - counts.sum()
    labels = np.repeat(np.arange(n_classes), counts)
    labels = labels[rng.permutation(labels.size)]
    features = centres[labels] + rng.normal(0.0, spread, size=(labels.size, steps))
    return Dataset(
        features,
        labels,
        [f"class_{c}" for c in range(n_classes)],
        [f"f{j:02d}" for j in range(steps)],
    )


def write_csv(ds: Dataset, path, label_column: str = "Attack_type") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(ds.feature_names) + [label_column])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [ds.class_names[label]])


def write_schema(path, label_column: str = "Attack_type", class_names=None) -> None:
    schema = {"label_column": label_column, "drop_columns": [], "categorical_columns": []}
    if class_names is not None:
        schema["class_map"] = {name: i for i, name in enumerate(class_names)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=2)
        fh.write("\n")
