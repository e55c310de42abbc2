"""Class-conditional label noise and the unbiased reweighted loss."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, SingularMatrixError

ROW_SUM_TOL = 1e-12
MAX_CONDITION = 1e8
SMOOTHING = 1e-6


@dataclass(frozen=True)
class ConfusionMatrix:
    """Row-stochastic ``F``: ``F[y, z]`` is the chance that class ``y`` is observed as ``z``."""

    F: np.ndarray

    def __post_init__(self):
        F = np.array(self.F, dtype=float)
        if F.ndim != 2 or F.shape[0] != F.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {F.shape}")
        if np.any(F < 0) or np.any(F > 1):
            raise ValueError("confusion matrix entries must lie in [0, 1]")
        if np.max(np.abs(F.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("confusion matrix rows must sum to 1")
        F.setflags(write=False)
        object.__setattr__(self, "F", F)

    @property
    def k(self) -> int:
        return self.F.shape[0]


@dataclass(frozen=True)
class ReweightMatrix:
    Lam: np.ndarray
    source: ConfusionMatrix
    condition: float


def uniform_confusion(k: int, rho: float) -> ConfusionMatrix:
    """Keep the label with probability ``1 - rho``, else flip uniformly to another class."""
    if k < 2:
        raise ValueError("uniform flipping needs k >= 2")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"noise rate must be in [0, 1], got {rho}")
    if rho >= (k - 1) / k:
        warnings.warn(
            f"noise rate {rho} >= (k-1)/k = {(k - 1) / k:.4f}; the confusion matrix is not invertible "
            "or flips labels toward a wrong majority",
            stacklevel=2,
        )
    F = np.full((k, k), rho / (k - 1))
    np.fill_diagonal(F, 1.0 - rho)
    return ConfusionMatrix(F)


def apply_noise(labels, F: ConfusionMatrix, seed=None) -> np.ndarray:
    """Draw each noisy label independently from the row of ``F`` of its clean label."""
    labels = np.asarray(labels, dtype=int)
    k = F.k
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"labels must lie in 0..{k - 1}")
    rng = np.random.default_rng(seed)
    u = rng.random(labels.shape)
    cdf = np.cumsum(F.F, axis=1)
    cdf[:, -1] = 1.0
    noisy = np.sum(u[..., None] >= cdf[labels], axis=-1)
    return noisy.astype(int)


def invert_confusion(F: ConfusionMatrix, max_condition: float = MAX_CONDITION) -> ReweightMatrix:
    cond = float(np.linalg.cond(F.F))
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularMatrixError(
            f"confusion matrix is singular or ill-conditioned (condition {cond:.3e}); "
            "the noise rate is too close to (k-1)/k",
            condition=cond,
        )
    Lam = np.linalg.inv(F.F)
    Lam.setflags(write=False)
    return ReweightMatrix(Lam, F, cond)


def estimate_confusion(clean, noisy, k: int | None = None) -> ConfusionMatrix:
    """Row-normalized co-occurrence counts with additive smoothing."""
    clean = np.asarray(clean, dtype=int)
    noisy = np.asarray(noisy, dtype=int)
    if clean.shape != noisy.shape:
        raise DimensionError("clean and noisy label arrays differ in length")
    if k is None:
        k = int(max(clean.max(), noisy.max())) + 1
    counts = np.zeros((k, k))
    np.add.at(counts, (clean, noisy), 1.0)
    for c in range(k):
        if counts[c].sum() == 0:
            raise DataError(f"class {c} never appears among the clean labels")
    counts += SMOOTHING
    F = counts / counts.sum(axis=1, keepdims=True)
    # renormalize once more so rows sum to 1 to machine precision
    F = F / F.sum(axis=1, keepdims=True)
    return ConfusionMatrix(F)


def weighted_loss(loss_vector, Lam, noisy_label: int) -> float:
    """``sum_i Lam[noisy_label, i] * loss(f(x), i)``; may be negative."""
    Lam = Lam.Lam if isinstance(Lam, ReweightMatrix) else np.asarray(Lam, dtype=float)
    return float(Lam[int(noisy_label)] @ np.asarray(loss_vector, dtype=float))


def reweighted_targets(noisy_labels, Lam) -> np.ndarray:
    """Target rows ``Lam[noisy_label]``.

    The package losses are affine in the target vector, so training on these
    rows minimizes the reweighted loss exactly.
    """
    Lam = Lam.Lam if isinstance(Lam, ReweightMatrix) else np.asarray(Lam, dtype=float)
    return np.array(Lam[np.asarray(noisy_labels, dtype=int)], dtype=float)


def expected_weighted_loss(loss_vector, F: ConfusionMatrix, Lam, y: int) -> float:
    """Exact expectation of the reweighted loss over the noisy label given class ``y``."""
    Lam = Lam.Lam if isinstance(Lam, ReweightMatrix) else np.asarray(Lam, dtype=float)
    v = np.asarray(loss_vector, dtype=float)
    return float(sum(F.F[y, z] * (Lam[z] @ v) for z in range(F.k)))


def write_confusion_csv(path, F: ConfusionMatrix):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in F.F:
            writer.writerow([repr(float(v)) for v in row])


def read_confusion_csv(path) -> ConfusionMatrix:
    with Path(path).open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return ConfusionMatrix(np.array(rows))
