"""Feedforward networks with smooth activations, losses and checkpoint I/O.

A network maps ``x`` to ``phi_L(W_L phi_{L-1}(... phi_1(W_1 x)))``. There are
no bias terms; every layer is a weight matrix of shape ``(d_i, d_{i-1})``.
Class labels are 0-based throughout the package.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import special

from .errors import (
    CorruptPayloadError,
    DimensionError,
    NumericError,
    VersionMismatchError,
)

FORMAT_VERSION = 1
FLATTEN_ORDER = "row-major"


class ActivationKind(str, enum.Enum):
    TANH = "tanh"
    SIGMOID = "sigmoid"
    GELU = "gelu"
    SOFTPLUS = "softplus"
    IDENTITY = "identity"


class LossKind(str, enum.Enum):
    CE = "ce"
    SQERR_PROB = "sqerr_prob"


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _derivatives(kind: ActivationKind, z: np.ndarray, order: int) -> list[np.ndarray]:
    """Value and derivatives up to ``order`` (at most 3) of an activation."""
    kind = ActivationKind(kind)
    if kind is ActivationKind.TANH:
        t = np.tanh(z)
        d1 = 1.0 - t * t
        out = [t, d1, -2.0 * t * d1, -2.0 * d1 * (1.0 - 3.0 * t * t)]
    elif kind is ActivationKind.SIGMOID:
        s = special.expit(z)
        d1 = s * (1.0 - s)
        out = [s, d1, d1 * (1.0 - 2.0 * s), d1 * (1.0 - 6.0 * s + 6.0 * s * s)]
    elif kind is ActivationKind.SOFTPLUS:
        s = special.expit(z)
        d1 = s * (1.0 - s)
        out = [np.logaddexp(0.0, z), s, d1, d1 * (1.0 - 2.0 * s)]
    elif kind is ActivationKind.GELU:
        cdf = special.ndtr(z)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        out = [z * cdf, cdf + z * pdf, pdf * (2.0 - z * z), pdf * (z**3 - 4.0 * z)]
    else:
        z = np.asarray(z, dtype=float)
        out = [z.copy(), np.ones_like(z), np.zeros_like(z), np.zeros_like(z)]
    return out[: order + 1]


def activation_eval(kind, z):
    """Return ``(phi(z), phi'(z), phi''(z))`` using closed-form derivatives."""
    return tuple(_derivatives(kind, np.asarray(z, dtype=float), 2))


def activation_third(kind, z):
    return _derivatives(kind, np.asarray(z, dtype=float), 3)[3]


# Constants stated for the common activations. For Tanh the third entry is
# the stated value 1, although sup|tanh'''| = 2 (attained at 0); use
# ``sampled_derivative_sups`` when a certified bound is needed.
_DECLARED_LIPSCHITZ = {
    ActivationKind.SIGMOID: (0.25, 0.25, 0.25),
    ActivationKind.TANH: (1.0, 1.0, 1.0),
    ActivationKind.GELU: (
        1.0 + math.exp(-0.5) * _INV_SQRT_2PI,
        1.0 + math.exp(-0.5) * _INV_SQRT_2PI,
        1.0 + math.exp(-0.5) * _INV_SQRT_2PI,
    ),
    ActivationKind.IDENTITY: (1.0, 0.0, 0.0),
    # softplus' = sigmoid, so the bounds are those of sigmoid shifted one order
    ActivationKind.SOFTPLUS: (1.0, 0.25, 1.0 / (6.0 * math.sqrt(3.0))),
}


def lipschitz_constants(kind) -> tuple[float, float, float]:
    """Declared (kappa0, kappa1, kappa2): Lipschitz constants of phi, phi', phi''."""
    return _DECLARED_LIPSCHITZ[ActivationKind(kind)]


def sampled_derivative_sups(kind, lo: float = -20.0, hi: float = 20.0, step: float = 1e-3):
    """Grid maxima of |phi'|, |phi''|, |phi'''| over ``[lo, hi]``."""
    n = int(round((hi - lo) / step)) + 1
    z = np.linspace(lo, hi, n)
    _, d1, d2, d3 = _derivatives(kind, z, 3)
    return float(np.max(np.abs(d1))), float(np.max(np.abs(d2))), float(np.max(np.abs(d3)))


def certified_lipschitz_constants(kind) -> tuple[float, float, float]:
    """Elementwise max of the declared constants and the sampled suprema."""
    declared = lipschitz_constants(kind)
    sampled = sampled_derivative_sups(kind)
    return tuple(max(a, b) for a, b in zip(declared, sampled))


# -- losses ---------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Per-sample loss on the network output.

    ``bound_C`` is the constant bounding the loss in generalization
    measures; ``"empirical"`` asks the caller to estimate it from data.
    """

    kind: LossKind = LossKind.CE
    bound_C: float | str = "empirical"

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        c = self.bound_C
        if isinstance(c, str):
            if c != "empirical":
                raise ValueError(f"bound_C must be positive or 'empirical', got {c!r}")
        elif not (c > 0 and math.isfinite(c)):
            raise ValueError(f"bound_C must be positive, got {c!r}")

    @classmethod
    def bounded(cls) -> "LossSpec":
        return cls(LossKind.SQERR_PROB, 2.0)


# Lipschitz constants of the loss in its first argument (logits). For CE the
# gradient p - e_y has norm <= sqrt(2), the Hessian diag(p) - pp^T has
# spectral norm <= 1/2 and the third derivative is a third central moment of
# a variable with range <= sqrt(2), hence <= 2^{3/2}/4. The squared-error
# values were obtained by dense random sampling and padded.
LOSS_LIPSCHITZ = {
    LossKind.CE: (math.sqrt(2.0), 0.5, 2.0**1.5 / 4.0),
    LossKind.SQERR_PROB: (math.sqrt(2.0), 1.0, 2.0),
}


def softmax(o: np.ndarray) -> np.ndarray:
    return special.softmax(o, axis=-1)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise DimensionError(f"label {int(bad)} out of range for k={k}")
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None].astype(int), 1.0, axis=-1)
    return out


# Both losses are affine in the target vector ``t``: for a one-hot ``t`` they
# reduce to the per-class loss, and for a general ``t`` they equal
# sum_c t_c * loss(o, c). Weighted/smoothed/mixed targets rely on this.


def loss_from_targets(o: np.ndarray, t: np.ndarray, kind) -> np.ndarray:
    kind = LossKind(kind)
    s = t.sum(axis=-1)
    if kind is LossKind.CE:
        return s * special.logsumexp(o, axis=-1) - np.sum(t * o, axis=-1)
    p = softmax(o)
    return s * (np.sum(p * p, axis=-1) + 1.0) - 2.0 * np.sum(t * p, axis=-1)


def loss_grad_from_targets(o: np.ndarray, t: np.ndarray, kind) -> np.ndarray:
    kind = LossKind(kind)
    s = t.sum(axis=-1, keepdims=True)
    p = softmax(o)
    if kind is LossKind.CE:
        return s * p - t
    r = s * p - t
    jr = p * r - p * np.sum(p * r, axis=-1, keepdims=True)
    return 2.0 * jr


def loss_hessian_from_targets(o: np.ndarray, t: np.ndarray, kind) -> np.ndarray:
    """Hessian of the loss in the output, shape ``o.shape + (k,)``."""
    kind = LossKind(kind)
    s = t.sum(axis=-1)[..., None, None]
    p = softmax(o)
    jac = _diag(p) - p[..., :, None] * p[..., None, :]
    if kind is LossKind.CE:
        return s * jac
    r = s[..., 0] * p - t
    pr = np.sum(p * r, axis=-1)[..., None, None]
    jr = np.einsum("...ij,...j->...i", jac, r)
    h = r[..., :, None] * jac - pr * jac - p[..., :, None] * jr[..., None, :]
    h = 2.0 * h + 2.0 * s * np.einsum("...ij,...jm->...im", jac, jac)
    return 0.5 * (h + np.swapaxes(h, -1, -2))


def _diag(p):
    out = np.zeros(p.shape + (p.shape[-1],))
    idx = np.arange(p.shape[-1])
    out[..., idx, idx] = p
    return out


def loss(output, y, spec: LossSpec | LossKind = LossKind.CE) -> float:
    """Loss of a single output vector against class ``y`` (0-based)."""
    kind = spec.kind if isinstance(spec, LossSpec) else LossKind(spec)
    output = np.asarray(output, dtype=float)
    k = output.shape[-1]
    if not (0 <= int(y) < k):
        raise DimensionError(f"label {y} out of range for k={k}")
    return float(loss_from_targets(output, one_hot(int(y), k), kind))


# -- network --------------------------------------------------------------


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Network:
    weights: tuple
    activations: tuple
    loss_spec: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        ws = tuple(_frozen(w) for w in self.weights)
        acts = tuple(ActivationKind(a) for a in self.activations)
        if len(ws) == 0:
            raise DimensionError("network needs at least one layer")
        if len(acts) != len(ws):
            raise DimensionError(f"{len(ws)} weight matrices but {len(acts)} activations")
        for i, w in enumerate(ws):
            if w.ndim != 2:
                raise DimensionError(f"layer {i}: weight must be 2-D, got shape {w.shape}")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i}: expects input dim {w.shape[1]} but layer {i - 1} "
                    f"outputs {ws[i - 1].shape[0]}"
                )
            if not np.all(np.isfinite(w)):
                raise NumericError(f"layer {i}: non-finite weights")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "activations", acts)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights)

    def with_weights(self, weights) -> "Network":
        return Network(tuple(weights), self.activations, self.loss_spec)

    @classmethod
    def random(cls, dims: Sequence[int], activations, loss_spec=None, rng=None) -> "Network":
        """Gaussian init with variance 2 / (fan_in + fan_out)."""
        rng = np.random.default_rng(rng)
        if isinstance(activations, (str, ActivationKind)):
            activations = [activations] * (len(dims) - 2) + [ActivationKind.IDENTITY]
        ws = [
            rng.normal(0.0, math.sqrt(2.0 / (d_in + d_out)), size=(d_out, d_in))
            for d_in, d_out in zip(dims[:-1], dims[1:])
        ]
        return cls(tuple(ws), tuple(activations), loss_spec or LossSpec())


@dataclass
class ForwardCache:
    """Pre-activations ``z[i]`` and post-activations ``a[i]`` (``a[0]`` is the input)."""

    z: list
    a: list


def forward_weights(weights, activations, x: np.ndarray):
    a = x
    zs, acts = [], [x]
    for i, (w, act) in enumerate(zip(weights, activations)):
        if a.shape[-1] != w.shape[1]:
            raise DimensionError(
                f"layer {i}: input has dimension {a.shape[-1]}, weight expects {w.shape[1]}"
            )
        z = a @ w.T
        a = _derivatives(act, z, 0)[0]
        zs.append(z)
        acts.append(a)
    return a, ForwardCache(zs, acts)


def forward(net: Network, x):
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite entries")
    return forward_weights(net.weights, net.activations, x)


def predict(net: Network, X) -> np.ndarray:
    out, _ = forward(net, X)
    return np.argmax(out, axis=-1)


def accuracy(net: Network, X, y) -> float:
    return float(np.mean(predict(net, X) == np.asarray(y)))


def mean_loss(net: Network, X, y, kind=None) -> float:
    kind = kind or net.loss_spec.kind
    out, _ = forward(net, X)
    return float(np.mean(loss_from_targets(out, one_hot(y, out.shape[-1]), kind)))


# -- checkpoints ----------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    network: Network
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def checkpoint_to_dict(ckpt: Checkpoint) -> dict[str, Any]:
    net = ckpt.network
    return {
        "format_version": ckpt.format_version,
        "dims": list(net.dims),
        "activations": [a.value for a in net.activations],
        "loss": {"kind": net.loss_spec.kind.value, "bound_C": net.loss_spec.bound_C},
        "flatten_order": FLATTEN_ORDER,
        # json writes floats with the shortest repr that round-trips exactly
        "layers": [w.ravel(order="C").tolist() for w in net.weights],
        "provenance": ckpt.provenance,
    }


def save_checkpoint(path, net_or_ckpt, provenance: dict | None = None) -> Path:
    ckpt = net_or_ckpt
    if isinstance(net_or_ckpt, Network):
        ckpt = Checkpoint(net_or_ckpt, dict(provenance or {}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(checkpoint_to_dict(ckpt), indent=1, sort_keys=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text + "\n")
    os.replace(tmp, path)
    return path


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    try:
        version = doc["format_version"]
    except (KeyError, TypeError) as exc:
        raise CorruptPayloadError("checkpoint has no format_version") from exc
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format_version {version}, this build reads {FORMAT_VERSION}"
        )
    try:
        dims = [int(d) for d in doc["dims"]]
        acts = doc["activations"]
        layers = doc["layers"]
        loss_doc = doc["loss"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPayloadError(f"checkpoint missing field: {exc}") from exc
    if len(layers) != len(dims) - 1 or len(acts) != len(layers):
        raise CorruptPayloadError(
            f"{len(dims)} dims, {len(acts)} activations and {len(layers)} layers are inconsistent"
        )
    weights = []
    for i, payload in enumerate(layers):
        expected = dims[i + 1] * dims[i]
        if len(payload) != expected:
            raise CorruptPayloadError(
                f"layer {i}: payload has {len(payload)} values, dims imply {expected}"
            )
        weights.append(np.asarray(payload, dtype=float).reshape(dims[i + 1], dims[i]))
    spec = LossSpec(loss_doc["kind"], loss_doc.get("bound_C", "empirical"))
    return Checkpoint(Network(tuple(weights), tuple(acts), spec), doc.get("provenance", {}), version)


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptPayloadError(f"{path}: unreadable checkpoint ({exc.msg})") from exc
    return checkpoint_from_dict(doc)
