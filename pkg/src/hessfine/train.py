"""Fine-tuning procedures: reweighted loss with layerwise projection and baselines."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import noise as noisemod
from .data import Dataset
from .errors import ConfigError, NumericError
from .hessian import backprop
from .net import Checkpoint, LossSpec, Network, forward_weights, loss_from_targets, one_hot

OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    # explicit per-layer radii; when None the geometric scheme D * gamma**i is used
    alphas: list | None = None
    distance: float = 0.5
    distance_growth: float = 1.0
    seed: int = 0
    early_stopping: bool = False
    patience: int = 10
    val_fraction: float = 0.2
    projection: str = "step"
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.projection not in ("step", "epoch"):
            raise ConfigError("projection must be 'step' or 'epoch'")
        if self.alphas is not None and any(a < 0 for a in self.alphas):
            raise ConfigError("projection radii must be nonnegative")
        if self.distance < 0 or self.distance_growth <= 0:
            raise ConfigError("distance must be >= 0 and distance_growth > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    def radii(self, num_layers: int) -> list[float]:
        if self.alphas is not None:
            if len(self.alphas) != num_layers:
                raise ConfigError(f"{len(self.alphas)} radii given for {num_layers} layers")
            return [float(a) for a in self.alphas]
        return [self.distance * self.distance_growth**i for i in range(num_layers)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    projection_hits: list = field(default_factory=list)
    best_epoch: int | None = None
    max_step_excess: float = 0.0

    def rows(self):
        for j, ep in enumerate(self.epochs):
            yield ep, "train", "loss", self.train_loss[j]
            yield ep, "train", "objective", self.objective[j]
            if self.val_acc[j] is not None:
                yield ep, "val", "accuracy", self.val_acc[j]
            if self.test_acc[j] is not None:
                yield ep, "test", "accuracy", self.test_acc[j]
            for i, dist in enumerate(self.distances[j]):
                yield ep, "train", f"distance_layer{i}", dist
            yield ep, "train", "projection_hits", self.projection_hits[j]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "metric", "value"])
            for ep, split, metric, value in self.rows():
                w.writerow([ep, split, metric, repr(float(value))])


# -- optimizers -----------------------------------------------------------


class _SGD:
    def __init__(self, params, momentum=0.0):
        self.momentum = momentum
        self.buf = [np.zeros_like(p) for p in params] if momentum else None

    def step(self, params, grads, lr):
        for j, (p, g) in enumerate(zip(params, grads)):
            if self.buf is not None:
                self.buf[j] = self.momentum * self.buf[j] + g
                g = self.buf[j]
            p -= lr * g


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for j, (p, g) in enumerate(zip(params, grads)):
            self.m[j] = self.b1 * self.m[j] + (1.0 - self.b1) * g
            self.v[j] = self.b2 * self.v[j] + (1.0 - self.b2) * g * g
            p -= lr * (self.m[j] / c1) / (np.sqrt(self.v[j] / c2) + self.eps)


def make_optimizer(name: str, params):
    if name == "sgd":
        return _SGD(params)
    if name == "momentum":
        return _SGD(params, momentum=0.9)
    if name == "adam":
        return _Adam(params)
    raise ConfigError(f"unknown optimizer {name!r}")


# -- projection -----------------------------------------------------------


def project_layer(W, W0, alpha: float) -> np.ndarray:
    """Pull ``W`` back onto the Frobenius ball of radius ``alpha`` around ``W0``.

    Points already inside the ball are returned unchanged (same values, not
    a recomputed ``1 * (W - W0) + W0``).
    """
    if alpha < 0:
        raise ValueError("radius must be nonnegative")
    W = np.asarray(W, dtype=float)
    diff = W - W0
    dist = float(np.linalg.norm(diff))
    if dist <= alpha or dist == 0.0:
        return W
    if alpha == 0.0:
        return np.array(W0, dtype=float, copy=True)
    return (alpha / dist) * diff + W0


def _project_all(weights, anchor, radii) -> int:
    hits = 0
    for i, (w, w0, a) in enumerate(zip(weights, anchor, radii)):
        if math.isinf(a):
            continue
        new = project_layer(w, w0, a)
        if new is not w:
            weights[i][...] = new
            hits += 1
    return hits


# -- targets --------------------------------------------------------------


def smoothed_targets(labels, k: int, alpha_ls: float) -> np.ndarray:
    if not 0.0 <= alpha_ls < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {alpha_ls}")
    T = one_hot(labels, k)
    if alpha_ls == 0.0:
        return T
    return (1.0 - alpha_ls) * T + alpha_ls / k


def mixup_batch(X, T, lam: float, perm):
    """Convex combination of each row with row ``perm[j]``; ``lam`` weights the original."""
    return lam * X + (1.0 - lam) * X[perm], lam * T + (1.0 - lam) * T[perm]


# -- training loop --------------------------------------------------------


def _as_network(init) -> Network:
    return init.network if isinstance(init, Checkpoint) else init


def _copy_weights(ws):
    return [np.array(w, dtype=float, copy=True) for w in ws]


def _accuracy(weights, activations, data):
    if data is None:
        return None
    out, _ = forward_weights(weights, activations, data.X)
    return float(np.mean(np.argmax(out, axis=1) == data.y))


def run_training(
    init,
    train: Dataset,
    config: TrainConfig,
    targets: np.ndarray | None = None,
    val: Dataset | None = None,
    test: Dataset | None = None,
    project: bool = False,
    l2sp: float = 0.0,
    mixup: float | None = None,
):
    """Minibatch training loop shared by every method.

    ``targets`` holds one target row per training sample (one-hot labels
    when omitted). The objective is the mean target-weighted loss, plus
    ``l2sp * sum ||W_i - W_i^(0)||_F^2``. With ``project`` every layer is
    pulled back onto its radius around the initialization after each
    optimizer step (or each epoch, per ``config.projection``).
    """
    net = _as_network(init)
    kind = net.loss_spec.kind
    acts = net.activations
    anchor = [np.array(w) for w in net.weights]
    weights = _copy_weights(net.weights)
    T_all = one_hot(train.y, net.num_classes) if targets is None else np.asarray(targets, dtype=float)
    radii = config.radii(net.num_layers) if project else [math.inf] * net.num_layers
    if config.early_stopping and val is None:
        raise ConfigError("early stopping needs a validation set")

    rng = np.random.default_rng([int(config.seed), 0])
    mix_rng = np.random.default_rng([int(config.seed), 1])
    opt = make_optimizer(config.optimizer, weights)
    trace = TrainTrace()
    n = len(train)

    def record(epoch, objective, hits):
        out, _ = forward_weights(weights, acts, train.X)
        raw = float(np.mean(loss_from_targets(out, one_hot(train.y, net.num_classes), kind)))
        trace.epochs.append(epoch)
        trace.train_loss.append(raw)
        trace.objective.append(objective)
        trace.val_acc.append(_accuracy(weights, acts, val))
        trace.test_acc.append(_accuracy(weights, acts, test))
        trace.distances.append([float(np.linalg.norm(w - w0)) for w, w0 in zip(weights, anchor)])
        trace.projection_hits.append(hits)
        for w, w0, a in zip(weights, anchor, radii):
            trace.max_step_excess = max(trace.max_step_excess, float(np.linalg.norm(w - w0)) - a)

    record(0, float("nan"), 0)
    # candidates for early stopping are trained epochs only, never the init itself
    best = None

    for epoch in range(1, config.epochs + 1):
        lr = config.lr
        if config.lr_decay_every:
            lr *= config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_every)
        order = rng.permutation(n)
        total, hits = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            Xb, Tb = train.X[idx], T_all[idx]
            if mixup is not None:
                lam = float(mix_rng.beta(mixup, mixup))
                Xb, Tb = mixup_batch(Xb, Tb, lam, mix_rng.permutation(len(idx)))
            losses, grads, _ = backprop(weights, acts, Xb, Tb, kind)
            batch_obj = float(np.mean(losses))
            if l2sp:
                for i, (w, w0) in enumerate(zip(weights, anchor)):
                    grads[i] = grads[i] + 2.0 * l2sp * (w - w0)
                    batch_obj += l2sp * float(np.sum((w - w0) ** 2))
            if not math.isfinite(batch_obj):
                raise NumericError(f"training diverged: non-finite loss in epoch {epoch}")
            total += batch_obj * len(idx)
            opt.step(weights, grads, lr)
            if project and config.projection == "step":
                hits += _project_all(weights, anchor, radii)
                for w, w0, a in zip(weights, anchor, radii):
                    trace.max_step_excess = max(trace.max_step_excess, float(np.linalg.norm(w - w0)) - a)
        if project and config.projection == "epoch":
            hits += _project_all(weights, anchor, radii)
        record(epoch, total / n, hits)

        if config.early_stopping:
            acc = trace.val_acc[-1]
            if best is None or acc > best[0]:
                best = (acc, epoch, _copy_weights(weights))
            elif epoch - best[1] >= config.patience:
                break

    if best is not None:
        weights = best[2]
        trace.best_epoch = best[1]
    return net.with_weights(weights), trace


# -- methods --------------------------------------------------------------


def finetune_vanilla(init, train, config, val=None, test=None):
    return run_training(init, train, config, val=val, test=test)


def finetune_project(init, train, config, val=None, test=None):
    """Distance-constrained fine-tuning on the unweighted loss."""
    return run_training(init, train, config, val=val, test=test, project=True)


def finetune_reweight(init, train, F, config, val=None, test=None):
    Lam = noisemod.invert_confusion(F)
    return run_training(init, train, config, targets=noisemod.reweighted_targets(train.y, Lam), val=val, test=test)


def algorithm1(init, train, F, config, val=None, test=None, project=True):
    """Reweighted loss with ``Lam = F^{-1}`` and layerwise projection onto the radii."""
    Lam = noisemod.invert_confusion(F)
    T = noisemod.reweighted_targets(train.y, Lam)
    return run_training(init, train, config, targets=T, val=val, test=test, project=project)


def finetune_l2sp(init, train, config, penalty: float, val=None, test=None):
    if penalty < 0:
        raise ConfigError("l2-sp penalty must be >= 0")
    return run_training(init, train, config, val=val, test=test, l2sp=penalty)


def finetune_labelsmooth(init, train, config, alpha_ls: float, val=None, test=None):
    T = smoothed_targets(train.y, _as_network(init).num_classes, alpha_ls)
    return run_training(init, train, config, targets=T, val=val, test=test)


def finetune_mixup(init, train, config, alpha_mix: float, val=None, test=None):
    if not alpha_mix > 0:
        raise ConfigError("mixup alpha must be positive")
    return run_training(init, train, config, val=val, test=test, mixup=alpha_mix)


def pretrain(source: Dataset, dims, activations, config: TrainConfig, loss_spec: LossSpec | None = None) -> Checkpoint:
    """Train a randomly initialized network on a source task."""
    dims = list(dims)
    if dims[0] != source.d or dims[-1] != source.k:
        raise ConfigError(f"architecture {dims} does not match data (d={source.d}, k={source.k})")
    init = Network.random(dims, activations, loss_spec or LossSpec(), rng=np.random.default_rng([int(config.seed), 7]))
    net, trace = run_training(init, source, config)
    prov = {
        "command": "pretrain",
        "seed": int(config.seed),
        "source": source.provenance,
        "final_train_loss": trace.train_loss[-1],
    }
    return Checkpoint(net, prov)
