"""Block soft thresholding and block-sparse coding by ISTA.

A block code is an array of shape ``(..., 3K, a)`` viewed as ``K`` stacked
``3 x a`` blocks. Block soft thresholding shrinks each block radially:

    Pi_k <- max(0, 1 - lam_k / |Pi_k|_F) * Pi_k

which is the proximal operator of ``lam * sum_k |Pi_k|_F``. The reference
solver minimises ``0.5 * |X - D Psi|_F^2 + lam * sum_k |Pi_k|_F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffmath import Tensor, custom_op
from .errors import ShapeError


def _blocks(shape, block_rows):
    *lead, rows, a = shape
    if rows % block_rows:
        raise ShapeError(f"{rows} rows do not split into blocks of {block_rows}")
    n = int(np.prod(lead)) if lead else 1
    return n, rows // block_rows, block_rows * a


def bst(psi, lam, block_rows: int = 3):
    """Block soft thresholding with per-block thresholds ``lam`` (length ``K``).

    Returns a :class:`Tensor` (differentiable in both arguments) when either
    input is a tensor, otherwise an ``ndarray``.
    """
    differentiable = isinstance(psi, Tensor) or isinstance(lam, Tensor)
    x = psi.data if isinstance(psi, Tensor) else np.asarray(psi, dtype=np.float64)
    lam_arr = lam.data if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
    n, K, m = _blocks(x.shape, block_rows)
    lam_arr = np.broadcast_to(lam_arr, (K,))
    if np.any(lam_arr < 0):
        raise ValueError("thresholds must be nonnegative")
    xb = x.reshape(n, K, m)
    out, norms, _ = kernels.bst_forward(xb, lam_arr)
    out = out.reshape(x.shape)
    if not differentiable:
        return out
    lam_shape = lam.shape if isinstance(lam, Tensor) else np.shape(lam)

    def backward(g):
        gx, glam = kernels.bst_backward(xb, lam_arr, norms, g.reshape(n, K, m))
        return gx.reshape(x.shape), glam.reshape(lam_shape) if lam_shape else glam.sum()

    return custom_op("bst", out, (psi, lam), backward,
                     {"active": (norms > lam_arr).reshape(x.shape[:-2] + (K,))})


def block_norms(psi, block_rows: int = 3) -> np.ndarray:
    x = np.asarray(psi.data if isinstance(psi, Tensor) else psi)
    n, K, m = _blocks(x.shape, block_rows)
    return np.linalg.norm(x.reshape(n, K, m), axis=-1).reshape(x.shape[:-2] + (K,))


def objective(psi, X, D, lam, block_rows: int = 3) -> float:
    r = X - D @ psi
    norms = block_norms(psi, block_rows)
    return float(0.5 * np.sum(r * r) + np.sum(np.asarray(lam) * norms))


def ista_step(psi, X, D, lam, alpha: float = 1.0, block_rows: int = 3) -> np.ndarray:
    """One proximal-gradient step: ``bst(psi - alpha D^T (D psi - X); alpha lam)``."""
    if alpha <= 0:
        raise ValueError("step size must be positive")
    psi = np.asarray(psi, dtype=np.float64)
    grad = D.T @ (D @ psi - X)
    return bst(psi - alpha * grad, alpha * np.asarray(lam, dtype=np.float64), block_rows)


@dataclass
class SolveResult:
    psi: np.ndarray
    objective: float
    iterations: int
    converged: bool


def solve_block_sparse(X, D, lam, max_iter: int = 10000, tol: float = 1e-12,
                       block_rows: int = 3, psi0=None) -> SolveResult:
    """ISTA with step ``1 / |D^T D|_2`` until the objective change drops below ``tol``.

    If ``max_iter`` is reached first the best iterate is returned with
    ``converged=False``.
    """
    X = np.asarray(X, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    lam = np.asarray(lam, dtype=np.float64)
    L = np.linalg.norm(D.T @ D, 2)
    alpha = 1.0 / L if L > 0 else 1.0
    psi = np.zeros((D.shape[1], X.shape[1])) if psi0 is None else np.array(psi0, dtype=np.float64)
    DtD = D.T @ D
    DtX = D.T @ X
    K = D.shape[1] // block_rows
    thr = np.broadcast_to(alpha * lam, (K,))
    f = objective(psi, X, D, lam, block_rows)
    best, best_f = psi, f
    for it in range(1, max_iter + 1):
        step = psi - alpha * (DtD @ psi - DtX)
        psi = bst(step, thr, block_rows)
        f_new = objective(psi, X, D, lam, block_rows)
        if f_new < best_f:
            best, best_f = psi, f_new
        if abs(f - f_new) < tol:
            return SolveResult(psi, f_new, it, True)
        f = f_new
    return SolveResult(best, best_f, max_iter, False)
