"""Gradients, Hessian-vector products and layerwise loss Hessians.

Layer ``i`` enters the network only through ``z_i = W_i a_{i-1}``, so the
per-sample Hessian of the loss in ``vec(W_i)`` (row-major) factors as

    H_i = M_i kron (a_{i-1} a_{i-1}^T),     M_i = d^2 loss / d z_i^2.

``layer_curvature`` computes the small ``d_i x d_i`` factors ``M_i`` for a
whole batch with one backward pass; ``hvp`` and ``layer_hessian_dense`` work
on the full ``p x p`` operator by forward-over-reverse differentiation and
serve as the reference route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import net as netmod
from .errors import CapacityError, DimensionError, NumericError, SingularNetworkError
from .linalg import spectral_norms, symmetric_eig
from .net import LossKind, Network

DENSE_CAP = 4096
ZERO_EIG_RTOL = 1e-10


def _targets(y, k: int) -> np.ndarray:
    """Integer label(s) -> one-hot rows; float arrays are taken as targets."""
    y = np.asarray(y)
    if y.dtype.kind in "iu":
        return netmod.one_hot(y, k)
    if y.dtype.kind == "f" and y.shape and y.shape[-1] == k:
        return y.astype(float)
    raise DimensionError(f"cannot interpret labels of shape {y.shape} for k={k}")


def _check_finite(name: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


def _derivs(acts, zs, order=2):
    return [netmod._derivatives(act, z, order) for act, z in zip(acts, zs)]


# -- first order ----------------------------------------------------------


def backprop(weights, activations, X, T, kind):
    """Per-sample losses and mean gradients over a batch.

    ``T`` holds one target vector per row of ``X``. Returns
    ``(losses, grads, outputs)``.
    """
    out, cache = netmod.forward_weights(weights, activations, X)
    losses = netmod.loss_from_targets(out, T, kind)
    g = netmod.loss_grad_from_targets(out, T, kind)
    n = X.shape[0]
    grads = [None] * len(weights)
    derivs = _derivs(activations, cache.z, order=1)
    delta = derivs[-1][1] * g
    for i in range(len(weights) - 1, -1, -1):
        grads[i] = delta.T @ cache.a[i] / n
        if i > 0:
            delta = (delta @ weights[i]) * derivs[i - 1][1]
    return losses, grads, out


def gradient(net: Network, x, y, kind=None) -> list[np.ndarray]:
    """Exact gradient of ``loss(f_W(x), y)`` for every layer.

    Entry ``i`` has the shape of ``W_i``. With a batch of inputs the
    gradient of the mean loss is returned.
    """
    kind = LossKind(kind or net.loss_spec.kind)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    T = np.atleast_2d(_targets(y, net.num_classes))
    losses, grads, out = backprop(net.weights, net.activations, X, T, kind)
    _check_finite("forward pass", out, losses)
    _check_finite("gradient", *grads)
    return grads


# -- curvature factors ----------------------------------------------------


@dataclass
class LayerCurvature:
    """Per-sample factors of layer ``layer``'s Hessian: ``H = M kron a a^T``."""

    layer: int
    M: np.ndarray  # (n, d_i, d_i)
    a: np.ndarray  # (n, d_{i-1}); the layer input

    def trace(self) -> np.ndarray:
        return np.trace(self.M, axis1=1, axis2=2) * np.sum(self.a * self.a, axis=1)

    def dense(self, j: int = 0) -> np.ndarray:
        return np.kron(self.M[j], np.outer(self.a[j], self.a[j]))


def layer_curvature(net: Network, X, y, kind=None, weights=None) -> list[LayerCurvature]:
    """Exact curvature factors of every layer for every sample in a batch."""
    kind = LossKind(kind or net.loss_spec.kind)
    weights = net.weights if weights is None else weights
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.atleast_2d(_targets(y, net.num_classes))
    out, cache = netmod.forward_weights(weights, net.activations, X)
    _check_finite("forward pass", out)
    derivs = _derivs(net.activations, cache.z)
    g = netmod.loss_grad_from_targets(out, T, kind)
    A = netmod.loss_hessian_from_targets(out, T, kind)

    L = len(weights)
    d1, d2 = derivs[-1][1], derivs[-1][2]
    M = d1[:, :, None] * A * d1[:, None, :] + _batch_diag(d2 * g)
    delta = d1 * g
    result = [None] * L
    for i in range(L - 1, -1, -1):
        result[i] = LayerCurvature(i, M, cache.a[i])
        if i > 0:
            w = weights[i]
            b = delta @ w
            d1, d2 = derivs[i - 1][1], derivs[i - 1][2]
            M = d1[:, :, None] * np.einsum("rj,nrs,sk->njk", w, M, w) * d1[:, None, :]
            M = M + _batch_diag(d2 * b)
            delta = d1 * b
    for c in result:
        _check_finite(f"layer {c.layer} curvature", c.M)
    return result


def _batch_diag(v: np.ndarray) -> np.ndarray:
    n, d = v.shape
    out = np.zeros((n, d, d))
    idx = np.arange(d)
    out[:, idx, idx] = v
    return out


# -- Hessian-vector products ----------------------------------------------


def _hvp_tangents(net: Network, x: np.ndarray, t: np.ndarray, layer: int, V: np.ndarray, kind):
    """Forward-over-reverse: ``H_layer @ vec(V_j)`` for a stack ``V`` of directions.

    ``V`` has shape ``(P, d_i, d_{i-1})``; the result has the same shape.
    """
    weights, acts = net.weights, net.activations
    out, cache = netmod.forward_weights(weights, acts, x[None, :])
    derivs = _derivs(acts, cache.z)
    L = len(weights)

    # tangent forward pass; layers before ``layer`` have zero tangent
    zdots = [None] * L
    a_dot = None
    for j in range(layer, L):
        if j == layer:
            z_dot = np.einsum("prc,c->pr", V, cache.a[j][0])
        else:
            z_dot = a_dot @ weights[j].T
        zdots[j] = z_dot
        a_dot = derivs[j][1][0] * z_dot

    g = netmod.loss_grad_from_targets(out, t[None, :], kind)[0]
    A = netmod.loss_hessian_from_targets(out, t[None, :], kind)[0]
    g_dot = a_dot @ A

    d1, d2 = derivs[-1][1][0], derivs[-1][2][0]
    delta = d1 * g
    delta_dot = d2 * zdots[-1] * g + d1 * g_dot
    for j in range(L - 1, layer, -1):
        b = delta @ weights[j]
        b_dot = delta_dot @ weights[j]
        d1, d2 = derivs[j - 1][1][0], derivs[j - 1][2][0]
        delta = d1 * b
        delta_dot = d1 * b_dot + d2 * zdots[j - 1] * b
    return delta_dot[:, :, None] * cache.a[layer][0][None, None, :]


def _layer_shape(net: Network, layer: int):
    if not 0 <= layer < net.num_layers:
        raise DimensionError(f"layer {layer} out of range for a {net.num_layers}-layer network")
    return net.weights[layer].shape


def hvp(net: Network, x, y, layer: int, v, kind=None) -> np.ndarray:
    """``H_layer[loss(f(x), y)] @ v`` with ``v`` a row-major flattening of ``W_layer``."""
    kind = LossKind(kind or net.loss_spec.kind)
    shape = _layer_shape(net, layer)
    v = np.asarray(v, dtype=float)
    p = shape[0] * shape[1]
    if v.shape != (p,):
        raise DimensionError(f"layer {layer}: vector has shape {v.shape}, expected ({p},)")
    if not np.all(np.isfinite(v)):
        raise NumericError("hvp direction contains non-finite entries")
    x = np.asarray(x, dtype=float)
    t = _targets(y, net.num_classes)
    out = _hvp_tangents(net, x, t, layer, v.reshape((1,) + shape), kind)
    return out.reshape(p)


def hvp_batch(net: Network, x, y, layer: int, vs, kind=None) -> np.ndarray:
    """Rows of ``vs`` mapped through the layer Hessian; shape ``(P, p)``."""
    kind = LossKind(kind or net.loss_spec.kind)
    shape = _layer_shape(net, layer)
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    t = _targets(y, net.num_classes)
    out = _hvp_tangents(net, np.asarray(x, dtype=float), t, layer, vs.reshape((-1,) + shape), kind)
    return out.reshape(vs.shape[0], -1)


# -- dense Hessians and spectra -------------------------------------------


@dataclass
class LayerHessian:
    layer: int
    matrix: np.ndarray
    order: str = netmod.FLATTEN_ORDER


@dataclass
class SpectralSummary:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray | None
    trace: float
    positive_trace: float

    def csv_rows(self, layer: int):
        return [(layer, j, float(lam)) for j, lam in enumerate(self.eigenvalues)]


def layer_hessian_dense(net: Network, x, y, layer: int, kind=None, dense_cap: int = DENSE_CAP) -> LayerHessian:
    """Materialize ``H_layer`` column by column from Hessian-vector products."""
    shape = _layer_shape(net, layer)
    p = shape[0] * shape[1]
    if p > dense_cap:
        raise CapacityError(
            f"layer {layer} has {p} parameters, above the dense cap {dense_cap}; "
            "use layer_curvature or hutchinson_trace instead",
            layer=layer,
            size=p,
            cap=dense_cap,
        )
    H = hvp_batch(net, x, y, layer, np.eye(p), kind=kind).T
    H = 0.5 * (H + H.T)
    _check_finite(f"layer {layer} Hessian", H)
    return LayerHessian(layer, H)


def _matrix(H) -> np.ndarray:
    return H.matrix if isinstance(H, LayerHessian) else np.asarray(H, dtype=float)


def spectral_summary(H, method: str = "auto", vectors: bool = True) -> SpectralSummary:
    A = _matrix(H)
    w, U = symmetric_eig(A, method=method)
    lam_max = float(np.max(np.abs(w))) if w.size else 0.0
    w = np.where(np.abs(w) < ZERO_EIG_RTOL * max(1.0, lam_max), 0.0, w)
    return SpectralSummary(
        eigenvalues=w,
        eigenvectors=U if vectors else None,
        trace=float(np.sum(w)),
        positive_trace=float(np.sum(np.maximum(w, 0.0))),
    )


def truncate_psd(H, method: str = "auto"):
    """Project a symmetric matrix onto its nonnegative eigenspace: ``U max(D, 0) U^T``."""
    summary = spectral_summary(H, method=method)
    w, U = summary.eigenvalues, summary.eigenvectors
    pos = np.maximum(w, 0.0)
    Hp = (U * pos) @ U.T
    Hp = 0.5 * (Hp + Hp.T)
    if isinstance(H, LayerHessian):
        return LayerHessian(H.layer, Hp, H.order), summary
    return Hp, summary


def quadratic_form_pos(H, v, method: str = "auto") -> float:
    """``v^T H^+ v``: the quadratic form restricted to positive eigendirections."""
    A = _matrix(H)
    v = np.asarray(v, dtype=float)
    if v.shape != (A.shape[0],):
        raise DimensionError(f"vector has shape {v.shape}, matrix is {A.shape}")
    if A.shape[0] > DENSE_CAP:
        raise CapacityError(f"matrix of size {A.shape[0]} exceeds the dense cap {DENSE_CAP}")
    summary = spectral_summary(A, method=method)
    proj = summary.eigenvectors.T @ v
    return float(np.sum(np.maximum(summary.eigenvalues, 0.0) * proj * proj))


def positive_part_batch(M: np.ndarray, method: str = "auto") -> np.ndarray:
    """``M^+`` for a stack of small symmetric matrices."""
    w, U = symmetric_eig(M, method=method)
    scale = np.maximum(1.0, np.max(np.abs(w), axis=-1, keepdims=True))
    w = np.where(np.abs(w) < ZERO_EIG_RTOL * scale, 0.0, w)
    return np.einsum("nij,nj,nkj->nik", U, np.maximum(w, 0.0), U)


# -- traces ---------------------------------------------------------------


def trace_exact(H) -> float:
    return float(np.trace(_matrix(H)))


def hutchinson(matvec: Callable[[np.ndarray], np.ndarray], p: int, m: int, rng=None):
    """Rademacher-probe trace estimate of the operator ``matvec``.

    ``matvec`` maps a ``(m, p)`` stack of probes to their images. Returns
    ``(estimate, stderr)``; the standard error is NaN for a single probe.
    """
    if m < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(rng)
    Z = rng.choice(np.array([-1.0, 1.0]), size=(m, p))
    samples = np.sum(Z * matvec(Z), axis=1)
    est = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return est, stderr


def hutchinson_trace(net: Network, x, y, layer: int, m: int, seed=0, kind=None):
    shape = _layer_shape(net, layer)
    p = shape[0] * shape[1]
    return hutchinson(lambda Z: hvp_batch(net, x, y, layer, Z, kind=kind), p, m, rng=seed)


# -- Hessian Lipschitz constant -------------------------------------------


def g_constant(num_layers: int, kappas, max_x_norm: float, dims, spec_norms) -> float:
    """Closed form of the layerwise-Hessian Lipschitz constant ``G``."""
    k0, k1, k2 = kappas
    L = num_layers
    if any(s <= 0 for s in spec_norms):
        raise SingularNetworkError("a layer has zero spectral norm")
    scale = max_x_norm * math.prod(dims) * math.prod(spec_norms)
    tail = max(1.0 / s**2 for s in spec_norms) * sum(1.0 / s for s in spec_norms)
    return 1.5 * (L + 1) ** 2 * math.e**6 * k2 * k1**2 * k0 ** (3 * (L + 1)) * scale**3 * tail


def network_kappas(net: Network, kind=None) -> tuple[float, float, float]:
    """Max over layers and the loss of the certified constants, floored at 1."""
    kind = LossKind(kind or net.loss_spec.kind)
    rows = [netmod.certified_lipschitz_constants(a) for a in net.activations]
    rows.append(netmod.LOSS_LIPSCHITZ[kind])
    return tuple(max(1.0, max(r[j] for r in rows)) for j in range(3))


def hessian_lipschitz_G(net: Network, X, kind=None) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    norms = spectral_norms(net.weights, nonzero=True)
    max_x = float(np.max(np.linalg.norm(X, axis=1)))
    return g_constant(net.num_layers, network_kappas(net, kind), max_x, net.dims, norms)
