"""Pure numpy implementations of the hot kernels.

Shapes follow the compiled module exactly:

* block codes are ``(N, K, m)`` with ``m = 3 * a`` entries per block,
* perspective dictionaries are ``(N, 2P, 9K)`` built from a shared ``(P, 3K)``.
"""

import numpy as np


def _norms(x):
    # rescale by the largest entry so tiny blocks do not underflow
    big = np.abs(x).max(axis=-1)
    safe = np.where(big > 0, big, 1.0)
    y = x / safe[..., None]
    return big * np.sqrt(np.einsum("nkm,nkm->nk", y, y))


def bst_forward(x, lam):
    norms = _norms(x)
    active = norms > lam
    scale = np.where(active, 1.0 - lam / np.where(active, norms, 1.0), 0.0)
    return x * scale[:, :, None], norms, scale


def bst_backward(x, lam, norms, g):
    active = norms > lam
    safe = np.where(active, norms, 1.0)
    scale = np.where(active, 1.0 - lam / safe, 0.0)
    unit = x / safe[:, :, None]
    ug = np.einsum("nkm,nkm->nk", unit, g)
    coef = np.where(active, (lam / safe) * ug, 0.0)
    gx = g * scale[:, :, None] + coef[:, :, None] * unit
    glam = -np.where(active, ug, 0.0).sum(axis=0)
    return gx, glam


def persp_dtilde_forward(dsharp, u, v, m):
    n, p = u.shape
    k3 = dsharp.shape[1]
    nvis = m.sum(axis=1)
    occl = (1.0 - m) / nvis[:, None]
    dt = dsharp[None] + (occl @ dsharp)[:, None, :]
    cu = ((m * u) / nvis[:, None]) @ dsharp
    cv = ((m * v) / nvis[:, None]) @ dsharp
    zu = -u[:, :, None] * dsharp[None] + cu[:, None, :]
    zv = -v[:, :, None] * dsharp[None] + cv[:, None, :]
    out = np.zeros((n, p, 2, 3 * k3))
    out[:, :, 0, :k3] = dt
    out[:, :, 0, 2 * k3:] = zu
    out[:, :, 1, k3:2 * k3] = dt
    out[:, :, 1, 2 * k3:] = zv
    return out.reshape(n, 2 * p, 3 * k3)


def persp_dtilde_backward(g, u, v, m):
    n, p = u.shape
    k3 = g.shape[2] // 3
    g4 = g.reshape(n, p, 2, 3 * k3)
    ga = g4[:, :, 0, :k3] + g4[:, :, 1, k3:2 * k3]
    gzu = g4[:, :, 0, 2 * k3:]
    gzv = g4[:, :, 1, 2 * k3:]
    nvis = m.sum(axis=1)
    wa = (1.0 - m) / nvis[:, None]
    wu = m * u / nvis[:, None]
    wv = m * v / nvis[:, None]
    out = ga.sum(axis=0)
    out += np.einsum("np,nk->pk", wa, ga.sum(axis=1))
    out -= np.einsum("np,npk->pk", u, gzu) + np.einsum("np,npk->pk", v, gzv)
    out += np.einsum("np,nk->pk", wu, gzu.sum(axis=1))
    out += np.einsum("np,nk->pk", wv, gzv.sum(axis=1))
    return out
