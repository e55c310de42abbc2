"""Symmetric eigensolvers and spectral norms."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, SingularNetworkError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# above this size the cyclic Jacobi sweep loop is too slow in Python
JACOBI_MAX_DIM = 64


def _off_norm(a: np.ndarray) -> np.ndarray:
    # summed directly: ||A||^2 - ||diag A||^2 cancels down to ~1e-8 ||A||
    mask = ~np.eye(a.shape[-1], dtype=bool)
    return np.sqrt(np.sum(a[..., mask] ** 2, axis=-1))


def jacobi_eigh(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigendecomposition of one or a stack of symmetric matrices.

    Every matrix in the stack is rotated with the same (p, q) pivot order but
    its own angle, so a batch costs about as much Python overhead as one
    matrix. A matrix stops rotating once it has converged. Convergence is declared when the off-diagonal Frobenius norm is
    at most ``tol * max(1, ||A||_F)``.

    Returns eigenvalues in descending order and eigenvectors as columns.
    """
    a = np.array(a, dtype=float, copy=True)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    a = a.reshape((-1, n, n))
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    scale = np.maximum(1.0, np.sqrt(np.sum(a * a, axis=(1, 2))))

    for _ in range(max_sweeps):
        # converged matrices are frozen so each result is independent of its batch
        live = _off_norm(a) > tol * scale
        if not np.any(live):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                active = live & (np.abs(apq) > 1e-300)
                if not np.any(active):
                    continue
                app = a[:, p, p]
                aqq = a[:, q, q]
                safe = np.where(active, apq, 1.0)
                theta = (aqq - app) / (2.0 * safe)
                big = np.abs(theta) > 1e150
                th = np.where(big, 1.0, theta)
                t = np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0))
                # for huge theta, t ~ 1 / (2 theta) without squaring
                t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
                t = np.where(theta == 0.0, 1.0, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                # A <- J^T A J with J the Givens rotation in the (p, q) plane
                col_p = a[:, :, p].copy()
                col_q = a[:, :, q]
                a[:, :, p] = c * col_p - s * col_q
                a[:, :, q] = s * col_p + c * col_q
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :]
                a[:, p, :] = c * row_p - s * row_q
                a[:, q, :] = s * row_p + c * row_q
                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p] = c * vp - s * vq
                v[:, :, q] = s * vp + c * vq
    else:
        off = _off_norm(a)
        if not np.all(off <= tol * scale):
            raise NumericError(
                f"Jacobi did not converge in {max_sweeps} sweeps; "
                f"max off-diagonal residual {float(np.max(off)):.3e}"
            )

    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w.reshape(batch_shape + (n,)), v.reshape(batch_shape + (n, n))


def symmetric_eig(a, method: str = "auto"):
    """Eigendecomposition dispatch: Jacobi for small matrices, LAPACK above."""
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        return jacobi_eigh(a)
    if method != "lapack":
        raise ValueError(f"unknown eigensolver {method!r}")
    if not np.all(np.isfinite(a)):
        raise NumericError("eigensolver input contains non-finite entries")
    w, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    return w[..., ::-1], v[..., ::-1]


def spectral_norm(w, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(w.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = w.T @ (w @ x)
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            # unlucky start in the null space
            x = rng.standard_normal(w.shape[1])
            x /= np.linalg.norm(x)
            continue
        x = y / norm_y
        new = np.sqrt(norm_y)
        if abs(new - sigma) <= tol * max(new, 1.0):
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(w @ x))


def spectral_norms(weights, nonzero: bool = False) -> list[float]:
    norms = [spectral_norm(w) for w in weights]
    if nonzero:
        for i, s in enumerate(norms):
            if s == 0.0:
                raise SingularNetworkError(f"layer {i} has zero spectral norm")
    return norms
