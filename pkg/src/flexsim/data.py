"""Datasets for the training harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.y)


@dataclass
class SyntheticDataset(Dataset):
    """Class-conditional Gaussian blobs, z-scored per feature.

    ``spread`` is the standard deviation of the class means relative to the
    unit within-class noise; smaller values make the classes overlap more.
    """

    X: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    n_classes: int = 10
    n_features: int = 64
    n_samples: int = 10_000
    seed: int = 0
    spread: float = 0.35

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0xB10B])
        means = rng.normal(0.0, self.spread, size=(self.n_classes, self.n_features))
        y = rng.integers(0, self.n_classes, size=self.n_samples)
        X = means[y] + rng.normal(size=(self.n_samples, self.n_features))
        X = (X - X.mean(axis=0)) / X.std(axis=0)
        self.X, self.y = X, y


def load_csv(path) -> Dataset:
    """Read a CSV with a header row; the ``label`` column holds integer classes."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column")
        li = header.index("label")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    labels = np.array([int(r[li]) for r in rows])
    X = np.array([[float(v) for j, v in enumerate(r) if j != li] for r in rows])
    if labels.min() < 0:
        raise ValueError("labels must be non-negative")
    return Dataset(X, labels, int(labels.max()) + 1)


def batch_indices(n, batch_size, iterations, seed):
    """Deterministic minibatch index stream: reshuffle each epoch, drop the ragged tail."""
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng([seed, 0xDA7A])
    per_epoch = n // batch_size
    perm = None
    for it in range(iterations):
        k = it % per_epoch
        if k == 0:
            perm = rng.permutation(n)
        yield perm[k * batch_size : (k + 1) * batch_size]
