"""Noise stability: Monte-Carlo perturbed losses against the layerwise Hessian trace."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .measures import layer_traces
from .net import Checkpoint, LossKind, Network, forward_weights, loss_from_targets, one_hot

DEFAULT_SIGMAS = tuple(round(0.010 + 0.001 * j, 3) for j in range(11))
DEFAULT_DRAWS = 500
MAX_NONFINITE_FRACTION = 0.01
HEATMAP_TAU = 1e-4
HEATMAP_PER_CLASS = 200


def _network(obj) -> Network:
    return obj.network if isinstance(obj, Checkpoint) else obj


def _sample_losses(weights, acts, X, T, kind) -> np.ndarray:
    out, _ = forward_weights(weights, acts, X)
    return loss_from_targets(out, T, kind)


def monte_carlo_deltas(loss_fn, weights, sigmas, N: int, seed=0) -> np.ndarray:
    """``loss_fn(W + sigma Z) - loss_fn(W)`` for each draw (rows) and sigma (columns).

    Draw ``j`` uses the generator seeded by ``(seed, j)`` and the same
    standard-normal directions ``Z`` for every sigma, so curves over sigma
    share their noise. Non-finite results are stored as NaN.
    """
    base = float(loss_fn(weights))
    out = np.empty((N, len(sigmas)))
    with np.errstate(all="ignore"):
        for j in range(N):
            rng = np.random.default_rng([int(seed), j])
            Z = [rng.standard_normal(np.shape(w)) for w in weights]
            for s, sigma in enumerate(sigmas):
                val = float(loss_fn([w + sigma * z for w, z in zip(weights, Z)])) - base
                out[j, s] = val if math.isfinite(val) else np.nan
    return out


def _draw_means(net, X, y, sigmas, N, seed, kind) -> np.ndarray:
    T = one_hot(y, net.num_classes)

    def mean_loss(ws):
        return np.mean(_sample_losses(ws, net.activations, X, T, kind))

    return monte_carlo_deltas(mean_loss, list(net.weights), sigmas, N, seed)


def _summarize(draws: np.ndarray, sigmas):
    N = draws.shape[0]
    bad = np.sum(np.isnan(draws), axis=0)
    for s, b in enumerate(bad):
        if b > MAX_NONFINITE_FRACTION * N:
            raise NumericError(f"{int(b)} of {N} perturbations at sigma={sigmas[s]} gave non-finite losses")
    mean = np.nanmean(draws, axis=0)
    good = N - bad
    std = np.nanstd(draws, axis=0, ddof=1)
    return mean, std / np.sqrt(good), bad


def perturbed_loss_estimate(net, X, y, sigma: float, N: int = DEFAULT_DRAWS, seed=0, kind=None):
    """``(mean, stderr)`` of the loss increase under ``W + U``, ``U`` entrywise N(0, sigma^2)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if N < 2:
        raise ValueError("need at least two draws for a standard error")
    net = _network(net)
    kind = LossKind(kind or net.loss_spec.kind)
    mean, err, _ = _summarize(_draw_means(net, np.atleast_2d(X), np.asarray(y), [sigma], N, seed, kind), [sigma])
    return float(mean[0]), float(err[0])


def hessian_approximation(net, X, y, sigma: float, half: bool = False, kind=None) -> float:
    """Mean over samples of ``sum_i sigma^2 tr H_i`` (times 1/2 with ``half``)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    net = _network(net)
    tr = layer_traces(net, np.atleast_2d(X), np.asarray(y), kind=kind, positive=False)
    factor = 0.5 if half else 1.0
    return float(factor * sigma**2 * np.mean(np.sum(tr, axis=1)))


@dataclass
class StabilityCurve:
    sigmas: list
    mc_mean: list
    mc_stderr: list
    approx: list
    N: int
    seed: int
    half: bool = False
    nonfinite: list = field(default_factory=list)
    normalization: str = "raw loss units, mean over the evaluation set"

    def __post_init__(self):
        if not len(self.sigmas) == len(self.mc_mean) == len(self.mc_stderr) == len(self.approx):
            raise ValueError("curve arrays are not aligned")
        if self.N < 2:
            raise ValueError("need N >= 2 draws")

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sigma", "mc_mean", "mc_stderr", "hessian_approx"])
            for row in zip(self.sigmas, self.mc_mean, self.mc_stderr, self.approx):
                w.writerow([repr(float(v)) for v in row])


def stability_curve(net, X, y, sigmas=DEFAULT_SIGMAS, N: int = DEFAULT_DRAWS, seed=0,
                    half: bool = False, kind=None) -> StabilityCurve:
    net = _network(net)
    kind = LossKind(kind or net.loss_spec.kind)
    sigmas = [float(s) for s in sigmas]
    if not sigmas or min(sigmas) <= 0:
        raise ValueError("sigma grid must be nonempty and positive")
    if N < 2:
        raise ValueError("need at least two draws for a standard error")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    mean, err, bad = _summarize(_draw_means(net, X, y, sigmas, N, seed, kind), sigmas)
    tr = float(np.mean(np.sum(layer_traces(net, X, y, kind=kind, positive=False), axis=1)))
    factor = 0.5 if half else 1.0
    approx = [factor * s * s * tr for s in sigmas]
    return StabilityCurve(sigmas, mean.tolist(), err.tolist(), approx, N, int(seed), half, bad.tolist())


def relative_rss(curve: StabilityCurve | None = None, mc=None, approx=None) -> float:
    """``sum (mc - approx)^2 / sum mc^2``."""
    if curve is not None:
        mc, approx = curve.mc_mean, curve.approx
    mc = np.asarray(mc, dtype=float)
    approx = np.asarray(approx, dtype=float)
    if mc.shape != approx.shape:
        raise ValueError("curves differ in length")
    denom = float(np.sum(mc * mc))
    if denom == 0.0:
        raise NumericError("Monte-Carlo curve is identically zero; relative RSS is undefined")
    return float(np.sum((mc - approx) ** 2) / denom)


@dataclass
class TraceHeatmap:
    matrix: np.ndarray
    threshold: float
    counts: list
    selection: str

    def diagonal_minimum_classes(self) -> list[int]:
        return [i for i in range(self.matrix.shape[0]) if self.matrix[i, i] <= np.min(self.matrix[i])]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            k = self.matrix.shape[0]
            w.writerow(["true_class", *[f"label_{j}" for j in range(k)], "samples"])
            for i in range(k):
                w.writerow([i, *[repr(float(v)) for v in self.matrix[i]], self.counts[i]])


def trace_heatmap(net, X, y, tau: float = HEATMAP_TAU, m: int = HEATMAP_PER_CLASS, seed=0,
                  kind=None, max_relax: int = 12) -> TraceHeatmap:
    """Mean total layer trace under each hypothesized label, grouped by true class.

    Only samples whose true-label loss is below ``tau`` count. If a class
    has none, ``tau`` is multiplied by 10 (with a warning) until every class
    has one; at most ``m`` samples per class are drawn with the seeded
    generator.
    """
    net = _network(net)
    kind = LossKind(kind or net.loss_spec.kind)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    k = net.num_classes
    missing = [c for c in range(k) if not np.any(y == c)]
    if missing:
        raise DataError(f"no samples of class {missing[0]} in the evaluation set")
    out, _ = forward_weights(net.weights, net.activations, X)
    losses = loss_from_targets(out, one_hot(y, k), kind)
    t = float(tau)
    for _ in range(max_relax + 1):
        ok = [np.flatnonzero((y == c) & (losses < t)) for c in range(k)]
        if all(len(o) for o in ok):
            break
        t *= 10.0
    else:
        bad = next(c for c in range(k) if not len(ok[c]))
        raise DataError(f"class {bad} has no sample with loss below {t / 10:g}")
    if t != tau:
        warnings.warn(f"loss threshold relaxed from {tau:g} to {t:g} so that every class is represented",
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    chosen = [np.sort(rng.choice(o, size=m, replace=False)) if len(o) > m else o for o in ok]
    idx = np.concatenate(chosen)
    totals = np.stack(
        [np.sum(layer_traces(net, X[idx], np.full(len(idx), j), kind=kind, positive=False), axis=1) for j in range(k)],
        axis=1,
    )
    mat = np.empty((k, k))
    start = 0
    for i, c in enumerate(chosen):
        mat[i] = np.mean(totals[start : start + len(c)], axis=0)
        start += len(c)
    if not np.all(np.isfinite(mat)):
        raise NumericError("heatmap has non-finite entries")
    selection = f"loss under true label < {t:g}; up to {m} per class, seeded subsample (seed {seed})"
    return TraceHeatmap(mat, t, [len(c) for c in chosen], selection)
