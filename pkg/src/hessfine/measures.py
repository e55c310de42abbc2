"""Hessian-based distance measures, KL divergence and norm/margin prior bounds."""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hessian as hess
from . import noise as noisemod
from .errors import CapacityError, ConfigError, DataError, DimensionError, NumericError, SingularNetworkError
from .linalg import spectral_norm
from .net import Checkpoint, LossKind, Network, forward, loss_from_targets, one_hot

EVAL_CAP = 256
DEFAULT_DELTA = 0.01
MARGIN_TOLERANCE = 0.01


def norm_1inf(X) -> float:
    """Largest absolute column sum."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(X), axis=0)))


def _network(obj) -> Network:
    return obj.network if isinstance(obj, Checkpoint) else obj


@dataclass
class DistanceVector:
    vectors: list  # flattened row-major W_i - W_i^(s)
    norms: list
    frobenius: list

    @classmethod
    def between(cls, net, init) -> "DistanceVector":
        net, init = _network(net), _network(init)
        if net.dims != init.dims:
            raise DimensionError(f"architectures differ: {net.dims} vs {init.dims}")
        diffs = [np.asarray(w) - np.asarray(w0) for w, w0 in zip(net.weights, init.weights)]
        vecs = [d.reshape(-1) for d in diffs]
        return cls(vecs, [float(np.linalg.norm(v)) for v in vecs], [float(np.linalg.norm(d, "fro")) for d in diffs])

    def matrices(self, net) -> list[np.ndarray]:
        return [v.reshape(w.shape) for v, w in zip(self.vectors, _network(net).weights)]


def eval_set(*datasets, cap: int | None = EVAL_CAP, seed=0):
    """Concatenate datasets and keep a seeded subsample of at most ``cap`` rows.

    The subsample indices are sorted so the result does not depend on the
    order the generator happened to draw them in.
    """
    parts = [d for d in datasets if d is not None]
    if not parts:
        raise DataError("evaluation set is empty")
    X = np.concatenate([d.X for d in parts])
    y = np.concatenate([d.y for d in parts])
    if cap is not None and len(y) > cap:
        idx = np.sort(np.random.default_rng(seed).choice(len(y), size=cap, replace=False))
        X, y = X[idx], y[idx]
    return X, y


def _chunks(n: int, jobs: int):
    jobs = max(1, min(int(jobs), n))
    bounds = np.linspace(0, n, jobs + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _map_samples(fn, X, y, jobs: int) -> np.ndarray:
    """Apply ``fn(X_chunk, y_chunk)`` over contiguous chunks and stack in sample order."""
    slices = _chunks(len(X), jobs)
    if len(slices) == 1:
        return fn(X, y)
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        parts = list(pool.map(lambda s: fn(X[s], y[s]), slices))
    return np.concatenate(parts, axis=0)


def _check_eval(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise DataError("evaluation set is empty")
    y = np.asarray(y)
    if y.shape[0] != X.shape[0]:
        raise DimensionError("evaluation inputs and labels differ in length")
    return X, y


# -- per-sample layer quantities ------------------------------------------


def layer_quadratic_forms(net, v_mats, X, y, kind=None, method: str = "factored",
                          dense_cap: int = hess.DENSE_CAP, jobs: int = 1) -> np.ndarray:
    """``v_i^T H_i^+ v_i`` for every sample (rows) and layer (columns).

    ``factored`` uses ``H_i = M_i kron a a^T`` so that the form equals
    ``(V_i a)^T M_i^+ (V_i a)``; ``dense`` materializes every ``H_i`` from
    Hessian-vector products and is limited to ``dense_cap`` parameters.
    """
    net = _network(net)
    X, y = _check_eval(X, y)
    if method == "dense":
        for i, w in enumerate(net.weights):
            if w.size > dense_cap:
                raise CapacityError(
                    f"layer {i} has {w.size} parameters, above the dense cap {dense_cap}",
                    layer=i, size=w.size, cap=dense_cap,
                )

        def fn(Xc, yc):
            out = np.empty((len(Xc), net.num_layers))
            for s in range(len(Xc)):
                for i, V in enumerate(v_mats):
                    H = hess.layer_hessian_dense(net, Xc[s], yc[s], i, kind=kind, dense_cap=dense_cap)
                    out[s, i] = hess.quadratic_form_pos(H, V.reshape(-1))
            return out

    elif method == "factored":

        def fn(Xc, yc):
            curv = hess.layer_curvature(net, Xc, yc, kind=kind)
            cols = []
            for c, V in zip(curv, v_mats):
                u = c.a @ V.T
                Mp = hess.positive_part_batch(c.M)
                cols.append(np.einsum("ni,nij,nj->n", u, Mp, u))
            return np.stack(cols, axis=1)

    else:
        raise ConfigError(f"unknown Hessian method {method!r}")
    return _map_samples(fn, X, y, jobs)


def layer_traces(net, X, y, kind=None, positive: bool = True, jobs: int = 1) -> np.ndarray:
    """Per-sample ``tr H_i^+`` (or signed ``tr H_i``) for each layer, via ``tr M_i * ||a||^2``."""
    net = _network(net)
    X, y = _check_eval(X, y)

    def fn(Xc, yc):
        curv = hess.layer_curvature(net, Xc, yc, kind=kind)
        cols = []
        for c in curv:
            M = hess.positive_part_batch(c.M) if positive else c.M
            cols.append(np.trace(M, axis1=1, axis2=2) * np.sum(c.a * c.a, axis=1))
        return np.stack(cols, axis=1)

    return _map_samples(fn, X, y, jobs)


def all_label_traces(net, X, kind=None, jobs: int = 1) -> np.ndarray:
    """Signed ``tr H_i`` for every input and every hypothesized label: shape ``(n, k, L)``."""
    net = _network(net)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k = net.num_classes
    per_label = [layer_traces(net, X, np.full(len(X), j), kind=kind, positive=False, jobs=jobs) for j in range(k)]
    return np.stack(per_label, axis=1)


# -- measures -------------------------------------------------------------


def _check_Cn(C, n):
    if not (C > 0 and math.isfinite(C)):
        raise ConfigError(f"loss bound C must be positive, got {C}")
    if n < 1:
        raise ConfigError(f"sample size n must be >= 1, got {n}")


def distance_measure_from_values(H_values, C: float, n: int) -> float:
    """``sum_i sqrt(C * H_i / n)`` from precomputed per-layer maxima."""
    _check_Cn(C, n)
    H = np.asarray(H_values, dtype=float)
    if np.any(H < 0) or not np.all(np.isfinite(H)):
        raise NumericError("per-layer Hessian quantities must be finite and nonnegative")
    return float(np.sum(np.sqrt(C * H / n)))


def hessian_distance_measure(net, init, X, y, C: float, n: int, kind=None, method: str = "factored",
                             dense_cap: int = hess.DENSE_CAP, jobs: int = 1):
    """Per-layer ``H_i = max_eval v_i^T H_i^+ v_i`` and the total ``sum_i sqrt(C H_i / n)``."""
    _check_Cn(C, n)
    net = _network(net)
    dist = DistanceVector.between(net, init)
    q = layer_quadratic_forms(net, dist.matrices(net), X, y, kind=kind, method=method,
                              dense_cap=dense_cap, jobs=jobs)
    H = [max(0.0, float(h)) for h in np.max(q, axis=0)]
    return H, distance_measure_from_values(H, C, n)


def _radii(alphas, L):
    a = np.broadcast_to(np.asarray(alphas, dtype=float), (L,)).copy()
    if np.any(a < 0):
        raise ConfigError("radii must be nonnegative")
    return a


def trace_distance_measure(net, init, X, y, alphas, C: float, n: int, kind=None, jobs: int = 1) -> float:
    """``sum_i sqrt(C alpha_i^2 max_eval tr H_i^+ / n)``."""
    _check_Cn(C, n)
    net = _network(net)
    a = _radii(alphas, net.num_layers)
    dist = DistanceVector.between(net, init)
    short = [i for i in range(net.num_layers) if a[i] < dist.norms[i] * (1 - 1e-12)]
    if short:
        warnings.warn(f"radius below the actual distance for layers {short}; the measure is not an upper bound",
                      stacklevel=2)
    tr = np.max(layer_traces(net, X, y, kind=kind, positive=True, jobs=jobs), axis=0)
    return float(np.sum(np.sqrt(C * a**2 * np.maximum(tr, 0.0) / n)))


def noise_factor(F) -> float:
    """``||(F^{-1})^T||_{1,inf}`` after the conditioning check."""
    if not isinstance(F, noisemod.ConfusionMatrix):
        F = noisemod.ConfusionMatrix(F)
    Lam = noisemod.invert_confusion(F).Lam
    return norm_1inf(Lam.T)


def noisy_measure(net, init, X, alphas, F, C: float, n: int, kind=None, jobs: int = 1) -> float:
    """``sqrt(C ||(F^{-1})^T||_{1,inf}) * sum_i sqrt(alpha_i^2 max_{x, y} |tr H_i|) / sqrt(n)``.

    The maximum runs over the inputs of the evaluation set paired with every
    one of the k labels.
    """
    _check_Cn(C, n)
    net = _network(net)
    a = _radii(alphas, net.num_layers)
    factor = noise_factor(F)
    traces = np.abs(all_label_traces(net, X, kind=kind, jobs=jobs))
    tr = np.max(traces, axis=(0, 1))
    return float(math.sqrt(C * factor) * np.sum(np.sqrt(a**2 * tr)) / math.sqrt(n))


def kl_divergence(W, Ws, sigmas) -> float:
    """KL between isotropic Gaussians centered at ``W`` and ``Ws`` with per-layer scales."""
    W = [np.asarray(w, dtype=float) for w in (_network(W).weights if isinstance(W, (Network, Checkpoint)) else W)]
    Ws = [np.asarray(w, dtype=float) for w in (_network(Ws).weights if isinstance(Ws, (Network, Checkpoint)) else Ws)]
    if len(W) != len(Ws):
        raise DimensionError("layer counts differ")
    s = np.broadcast_to(np.asarray(sigmas, dtype=float), (len(W),))
    if np.any(s <= 0):
        raise ConfigError("every sigma must be positive")
    return float(sum(np.sum((w - w0) ** 2) / (2.0 * si**2) for w, w0, si in zip(W, Ws, s)))


def empirical_C(net, X, y, kind=None) -> float:
    """Largest per-sample loss on the given samples."""
    net = _network(net)
    kind = LossKind(kind or net.loss_spec.kind)
    out, _ = forward(net, X)
    return float(np.max(loss_from_targets(out, one_hot(y, net.num_classes), kind)))


# -- margins --------------------------------------------------------------


def margins(net, X, y) -> np.ndarray:
    """Correct-class output minus the largest other output."""
    out, _ = forward(_network(net), X)
    y = np.asarray(y, dtype=int)
    rows = np.arange(len(y))
    correct = out[rows, y]
    other = out.copy()
    other[rows, y] = -np.inf
    return correct - np.max(other, axis=1)


def margin_selection(sample_margins, grid, tolerance: float = MARGIN_TOLERANCE) -> float:
    """Largest ``gamma`` in ``grid`` whose margin loss exceeds the 0-1 loss by less than ``tolerance``.

    Margin loss counts samples with margin below ``gamma``; the 0-1 loss
    counts samples with margin at most zero.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ConfigError("margin grid is empty")
    if np.any(grid <= 0):
        raise ConfigError("margins on the grid must be positive")
    m = np.asarray(sample_margins, dtype=float)
    zero_one = np.mean(m <= 0)
    ok = [g for g in grid if np.mean(m < g) - zero_one < tolerance]
    if not ok:
        warnings.warn("no margin on the grid meets the tolerance; using the smallest", stacklevel=2)
        return float(grid[0])
    return float(max(ok))


def default_margin_grid(sample_margins, size: int = 200) -> np.ndarray:
    top = float(np.max(np.abs(sample_margins))) if len(sample_margins) else 1.0
    return np.geomspace(1e-4, max(top, 2e-4), size)


# -- prior bounds ---------------------------------------------------------


def row_sum_norm(W) -> float:
    return float(np.max(np.sum(np.abs(np.asarray(W, dtype=float)), axis=1)))


def gouk_bound(W, Ws, n: int) -> float:
    inf = [row_sum_norm(w) for w in W]
    if any(v == 0 for v in inf):
        raise SingularNetworkError("a layer has zero row-sum norm")
    ratio = sum(row_sum_norm(np.asarray(w) - w0) / v for w, w0, v in zip(W, Ws, inf))
    return math.prod(2.0 * v for v in inf) * ratio / math.sqrt(n)


def li_bound(B, D, eps: float, n: int) -> float:
    """``B_i = ||W_i^(s)||_2``, ``D_i = ||W_i - W_i^(s)||_F``."""
    if not eps > 0:
        raise ConfigError("epsilon must be positive")
    s = [b + d for b, d in zip(B, D)]
    total = math.prod(s)
    lead = sum(total / si for si in s)
    return math.sqrt(lead**2 * sum(d * d for d in D) / (eps**2 * n))


def long_bound(spec, spec_diff, num_params: int, n: int) -> float:
    return math.sqrt(num_params / n * math.prod(s * s for s in spec) * sum(spec_diff))


def neyshabur_bound(spec, frob, gamma: float, n: int) -> float:
    if not gamma > 0:
        raise ConfigError("margin must be positive")
    if any(s == 0 for s in spec):
        raise SingularNetworkError("a layer has zero spectral norm")
    return math.sqrt(math.prod(s * s for s in spec) * sum(f * f / (s * s) for f, s in zip(frob, spec)) / (gamma**2 * n))


def pitas_bound(spec, frob_diff, gamma: float, n: int) -> float:
    return neyshabur_bound(spec, frob_diff, gamma, n)


@dataclass
class PriorBounds:
    gouk: float
    li: float
    long: float
    neyshabur: float
    pitas: float
    norms: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {"gouk": self.gouk, "li": self.li, "long": self.long, "neyshabur": self.neyshabur, "pitas": self.pitas}


def prior_bounds(net, init, X, y, gamma: float | None = None, delta: float = DEFAULT_DELTA,
                 eps: float | None = None) -> PriorBounds:
    """The five norm and margin bounds on ``net`` relative to ``init``.

    ``X, y`` is the training set: it fixes ``n``, the margin (when ``gamma``
    is None) and ``eps = 0.1 * mean training loss`` (when ``eps`` is None).
    ``delta`` is recorded only; none of the formulas carry a confidence term.
    """
    net, init = _network(net), _network(init)
    X, y = _check_eval(X, y)
    n = len(y)
    W = [np.asarray(w) for w in net.weights]
    Ws = [np.asarray(w) for w in init.weights]
    spec = [spectral_norm(w) for w in W]
    if any(s == 0 for s in spec):
        raise SingularNetworkError("a fine-tuned layer has zero spectral norm")
    spec_init = [spectral_norm(w) for w in Ws]
    spec_diff = [spectral_norm(w - w0) for w, w0 in zip(W, Ws)]
    frob = [float(np.linalg.norm(w)) for w in W]
    frob_diff = [float(np.linalg.norm(w - w0)) for w, w0 in zip(W, Ws)]
    if gamma is None:
        m = margins(net, X, y)
        gamma = margin_selection(m, default_margin_grid(m))
    if eps is None:
        out, _ = forward(net, X)
        eps = 0.1 * float(np.mean(loss_from_targets(out, one_hot(y, net.num_classes), net.loss_spec.kind)))
    norms = {
        "spectral": spec, "spectral_init": spec_init, "spectral_diff": spec_diff, "frobenius": frob,
        "frobenius_diff": frob_diff, "row_sum": [row_sum_norm(w) for w in W],
        "row_sum_diff": [row_sum_norm(w - w0) for w, w0 in zip(W, Ws)],
        "gamma": gamma, "eps": eps, "delta": delta, "n": n, "num_params": net.num_params,
    }
    return PriorBounds(
        gouk=gouk_bound(W, Ws, n),
        li=li_bound(spec_init, frob_diff, eps, n),
        long=long_bound(spec, spec_diff, net.num_params, n),
        neyshabur=neyshabur_bound(spec, frob, gamma, n),
        pitas=pitas_bound(spec, frob_diff, gamma, n),
        norms=norms,
    )


# -- report ---------------------------------------------------------------


@dataclass
class BoundReport:
    layer_H: list
    hessian_distance_total: float
    trace_measure_total: float
    noisy_measure_total: float
    kl: float
    prior: dict
    metadata: dict

    def validate(self):
        vals = [*self.layer_H, self.hessian_distance_total, self.trace_measure_total,
                self.noisy_measure_total, self.kl, *self.prior.values()]
        for v in vals:
            if not (math.isfinite(v) and v >= 0):
                raise NumericError(f"bound report holds an invalid value {v!r}")
        missing = {"C", "n", "eval_size", "eval_cap", "gamma", "eps_convention"} - set(self.metadata)
        if missing:
            raise ConfigError(f"bound report metadata is missing {sorted(missing)}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self):
        for i, h in enumerate(self.layer_H):
            yield f"H_layer{i}", h
        yield "hessian_distance", self.hessian_distance_total
        yield "trace_measure", self.trace_measure_total
        yield "noisy_measure", self.noisy_measure_total
        yield "kl", self.kl
        for name, v in self.prior.items():
            yield name, v

    def write(self, directory, stem: str = "bounds"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with (d / f"{stem}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bound", "value"])
            for name, v in self.rows():
                w.writerow([name, repr(float(v))])
        return d


def bound_report(net, init, train, test=None, C: float | str = 2.0, alphas=None, F=None,
                 kl_sigma: float = 0.1, eval_cap: int | None = EVAL_CAP, kind=None, seed=0,
                 jobs: int = 1, method: str = "factored", prior_data=None) -> BoundReport:
    """Every measure for one fine-tuned model.

    ``n`` is the training-set size; the Hessian maxima run over a capped
    subsample of train plus test. ``alphas`` default to the actual layer
    distances, ``F`` to the identity. The norm and margin bounds use
    ``prior_data = (X, y)`` when given (e.g. the noisy training labels),
    else the training set.
    """
    net = _network(net)
    kind = LossKind(kind or net.loss_spec.kind)
    X, y = eval_set(train, test, cap=eval_cap, seed=seed)
    n = len(train)
    if C == "empirical":
        C = empirical_C(net, X, y, kind)
    C = float(C)
    dist = DistanceVector.between(net, init)
    if alphas is None:
        alphas = dist.norms
    if F is None:
        F = np.eye(net.num_classes)
    H, total = hessian_distance_measure(net, init, X, y, C, n, kind=kind, method=method, jobs=jobs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trace_total = trace_distance_measure(net, init, X, y, alphas, C, n, kind=kind, jobs=jobs)
    noisy_total = noisy_measure(net, init, X, alphas, F, C, n, kind=kind, jobs=jobs)
    pb = prior_bounds(net, init, *(prior_data if prior_data is not None else (train.X, train.y)))
    meta = {
        "C": C, "n": n, "eval_size": int(len(y)), "eval_cap": eval_cap, "gamma": pb.norms["gamma"],
        "eps": pb.norms["eps"], "delta": DEFAULT_DELTA, "eps_convention": "dominant term only, eps = 0, xi omitted",
        "loss": kind.value, "kl_sigma": kl_sigma, "alphas": [float(a) for a in np.broadcast_to(alphas, (net.num_layers,))],
        "distances": dist.norms, "hessian_method": method, "prior_norms": pb.norms,
    }
    return BoundReport(H, total, trace_total, noisy_total, kl_divergence(net, init, kl_sigma), pb.values(), meta).validate()
