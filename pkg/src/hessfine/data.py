"""Synthetic tasks, CSV ingestion and splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    k: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=int)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DataError(f"features {X.shape} and labels {y.shape} do not line up")
        if X.shape[0] < 1:
            raise DataError("dataset is empty")
        if np.isnan(X).any():
            raise DataError("features contain NaN")
        if y.min() < 0 or y.max() >= self.k:
            raise DataError(f"labels must lie in 0..{self.k - 1}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, **extra) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.k, {**self.provenance, **extra})

    def with_labels(self, y, **extra) -> "Dataset":
        return Dataset(self.X, y, self.k, {**self.provenance, **extra})


def _balanced_labels(n: int, k: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def blob_centers(k: int, d: int, center_scale: float, seed) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0])
    return rng.normal(0.0, center_scale, size=(k, d))


def sample_blobs(centers: np.ndarray, n: int, spread: float, rng) -> tuple[np.ndarray, np.ndarray]:
    k, d = centers.shape
    y = _balanced_labels(n, k, rng)
    X = centers[y] + spread * rng.standard_normal((n, d))
    return X, y


def gaussian_blobs(k: int, d: int, n: int, spread: float = 1.0, center_scale: float = 3.0, seed=0) -> Dataset:
    """Isotropic Gaussian clusters around random centers with balanced classes."""
    if k < 2 or d < 1 or n < k:
        raise DataError(f"need k >= 2, d >= 1, n >= k (got k={k}, d={d}, n={n})")
    if spread < 0 or center_scale < 0:
        raise DataError("spread and center_scale must be nonnegative")
    centers = blob_centers(k, d, center_scale, seed)
    X, y = sample_blobs(centers, n, spread, np.random.default_rng([int(seed), 1]))
    prov = {"generator": "gaussian_blobs", "k": k, "d": d, "n": n, "spread": spread,
            "center_scale": center_scale, "seed": int(seed)}
    return Dataset(X, y, k, prov)


def related_centers(k: int, d: int, center_scale: float, seed, perturbation: float, jitter_seed) -> np.ndarray:
    if perturbation < 0:
        raise DataError("perturbation must be nonnegative")
    base = blob_centers(k, d, center_scale, seed)
    rng = np.random.default_rng([int(jitter_seed), 2])
    return base + perturbation * rng.standard_normal(base.shape)


def related_task(source: dict, perturbation: float, seed, n: int | None = None) -> Dataset:
    """A blob task whose centers are the ``source`` centers jittered by N(0, perturbation^2).

    ``source`` holds the ``gaussian_blobs`` parameters (as stored in a
    dataset's provenance).
    """
    k, d = int(source["k"]), int(source["d"])
    n = int(source["n"] if n is None else n)
    centers = related_centers(k, d, source["center_scale"], source["seed"], perturbation, seed)
    X, y = sample_blobs(centers, n, source["spread"], np.random.default_rng([int(seed), 3]))
    prov = {"generator": "related_task", "source": dict(source), "perturbation": perturbation,
            "seed": int(seed), "n": n}
    return Dataset(X, y, k, prov)


def two_spirals(n: int, turns: float = 1.5, noise: float = 0.0, seed=0) -> Dataset:
    """Two interleaved Archimedean spirals, radius growing linearly with angle."""
    if n < 2:
        raise DataError("two spirals needs n >= 2")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, 2, rng)
    t = np.sqrt(rng.random(n)) * turns * 2.0 * math.pi
    X = spiral_points(t, y)
    X = X + noise * rng.standard_normal(X.shape)
    prov = {"generator": "two_spirals", "n": n, "turns": turns, "noise": noise, "seed": int(seed)}
    return Dataset(X, y, 2, prov)


def spiral_points(t, y):
    sign = np.where(np.asarray(y) == 0, 1.0, -1.0)
    return np.stack([sign * t * np.cos(t), sign * t * np.sin(t)], axis=1)


def load_csv(path, label_column: str = "label", k: int | None = None) -> Dataset:
    """Numeric CSV with a header row; the label column holds integers 0..k-1."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise DataError(f"{path}: empty file") from exc
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field ({exc})") from exc
            lab = vals.pop(li)
            if not lab.is_integer():
                raise DataError(f"{path}:{lineno}: label {lab} is not an integer")
            labels.append(int(lab))
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels)
    k = int(k if k is not None else y.max() + 1)
    return Dataset(np.array(rows), y, k, {"generator": "csv", "path": str(path), "label_column": label_column})


def split_indices(y, k: int, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded partition of ``range(len(y))`` into three sorted index arrays.

    Stratified by class when every class has at least 3 samples; each class
    is cut at rounded cumulative fractions so proportions stay within one
    sample of the global ones.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    y = np.asarray(y, dtype=int)
    rng = np.random.default_rng(seed)
    counts = np.bincount(y, minlength=k)
    groups = [np.flatnonzero(y == c) for c in range(k)] if np.all(counts >= 3) else [np.arange(len(y))]
    parts = [[], [], []]
    cum = np.cumsum(fr)
    for g in groups:
        g = rng.permutation(g)
        cuts = np.rint(cum * len(g)).astype(int)
        cuts[-1] = len(g)
        start = 0
        for j, stop in enumerate(cuts):
            parts[j].extend(g[start:stop].tolist())
            start = stop
    return tuple(np.sort(np.array(p, dtype=int)) for p in parts)


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded (train, val, test) split; an empty part comes back as ``None``."""
    parts = split_indices(ds.y, ds.k, fractions, seed)
    return tuple(
        ds.subset(idx, split=name, split_seed=int(seed)) if len(idx) else None
        for name, idx in zip(("train", "val", "test"), parts)
    )
