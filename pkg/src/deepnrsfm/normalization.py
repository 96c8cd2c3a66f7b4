"""Normalised input/dictionary pairs for the generalised bilinear model.

For every camera and visibility pattern the observation ``W`` and the
first-layer dictionary are transformed so that, on the visible rows,

    M W_tilde = M D_tilde Psi_tilde

holds exactly for the true block code. Occluded coordinates never enter the
visible rows: visible means are taken over visible points only, and the
encoder sees ``M W_tilde``.

Layout conventions
------------------
* ``D_sharp`` is ``P x 3K``; row ``i`` holds the three rows of ``D1`` that
  belong to point ``i``, so ``D_sharp[i, 3k + c] = D1[3i + c, k]``.
* Orthogonal: ``W_tilde`` is ``P x 2``, ``D_tilde`` is ``P x 3K`` and
  ``Psi_tilde = phi (x) R[:, :2]`` is ``3K x 2``.
* Perspective: ``W_tilde`` is ``2P x 1`` with rows ``(u1, v1, u2, v2, ...)``,
  ``D_tilde`` is ``2P x 9K`` and ``Psi_tilde`` stacks the three columns of
  ``phi (x) R`` into a ``9K x 1`` vector.

All functions accept a single :class:`Observation` or an
:class:`ObservationBatch`; batched results carry a leading sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .diffmath import Tensor, add, custom_op, matmul, reshape, row_select, transpose
from .errors import AllOccluded, NonPositiveTz, ShapeError
from .geometry import Camera, as_camera


@dataclass
class Observation:
    """One sample: ``P x 2`` keypoints, visibility flags and object depth ``t_z``."""

    W: np.ndarray
    vis: np.ndarray
    t_z: float | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.vis = np.asarray(self.vis, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[1] != 2:
            raise ShapeError("W must be P x 2")
        if self.vis.shape != (self.W.shape[0],):
            raise ShapeError("vis must have one flag per point")
        if not np.all((self.vis == 0) | (self.vis == 1)):
            raise ValueError("visibility flags must be 0 or 1")
        if self.t_z is not None and not self.t_z > 0:
            raise NonPositiveTz(f"t_z must be positive, got {self.t_z}")

    @property
    def P(self) -> int:
        return self.W.shape[0]


@dataclass
class ObservationBatch:
    W: np.ndarray          # (N, P, 2)
    vis: np.ndarray        # (N, P)
    t_z: np.ndarray | None = None  # (N,)

    @classmethod
    def stack(cls, observations: Sequence[Observation]) -> "ObservationBatch":
        tz = [o.t_z for o in observations]
        return cls(np.stack([o.W for o in observations]),
                   np.stack([o.vis for o in observations]),
                   None if any(t is None for t in tz) else np.asarray(tz, dtype=np.float64))

    def __len__(self):
        return self.W.shape[0]

    def __getitem__(self, idx) -> "ObservationBatch":
        return ObservationBatch(self.W[idx], self.vis[idx],
                                None if self.t_z is None else self.t_z[idx])

    def observation(self, i: int) -> Observation:
        return Observation(self.W[i], self.vis[i], None if self.t_z is None else float(self.t_z[i]))


@dataclass
class NormalizedPair:
    W_tilde: np.ndarray
    D_tilde: object        # ndarray, or Tensor when built from a differentiable dictionary
    mask: np.ndarray       # row mask broadcastable against W_tilde
    camera: Camera

    @property
    def masked_W(self) -> np.ndarray:
        return self.mask * self.W_tilde


def dsharp_from_d1(D1):
    """``3P x K`` dictionary to its ``P x 3K`` point-major reshape."""
    K = D1.shape[1]
    P = D1.shape[0] // 3
    if isinstance(D1, Tensor):
        return reshape(transpose(reshape(D1, (P, 3, K)), (0, 2, 1)), (P, 3 * K))
    return np.asarray(D1).reshape(P, 3, K).transpose(0, 2, 1).reshape(P, 3 * K)


def d1_from_dsharp(D_sharp) -> np.ndarray:
    P, K3 = D_sharp.shape
    return np.asarray(D_sharp).reshape(P, K3 // 3, 3).transpose(0, 2, 1).reshape(3 * P, K3 // 3)


def _as_batch(obs):
    if isinstance(obs, Observation):
        return ObservationBatch.stack([obs]), True
    return obs, False


def _visible_counts(vis):
    nvis = vis.sum(axis=1)
    if np.any(nvis <= 0):
        bad = np.flatnonzero(nvis <= 0)
        raise AllOccluded(f"sample(s) {bad.tolist()} have no visible keypoint")
    return nvis


def _squeeze(pair: NormalizedPair) -> NormalizedPair:
    D = pair.D_tilde
    D = reshape(D, D.shape[1:]) if isinstance(D, Tensor) else D[0]
    return NormalizedPair(pair.W_tilde[0], D, pair.mask[0], pair.camera)


def normalize_orthogonal(obs, D_sharp) -> NormalizedPair:
    """Centre by the visible mean; shift the dictionary by the occluded mean."""
    batch, single = _as_batch(obs)
    vis = batch.vis
    nvis = _visible_counts(vis)
    W = batch.W
    vis_mean = (vis[:, :, None] * W).sum(axis=1) / nvis[:, None]
    W_tilde = W - vis_mean[:, None, :]
    occl = ((1.0 - vis) / nvis[:, None])[:, None, :]        # (N, 1, P)
    if isinstance(D_sharp, Tensor):
        D_tilde = add(D_sharp, matmul(occl, D_sharp))
    else:
        D_sharp = np.asarray(D_sharp, dtype=np.float64)
        D_tilde = D_sharp + occl @ D_sharp
    pair = NormalizedPair(W_tilde, D_tilde, vis[:, :, None], Camera.ORTHOGONAL)
    return _squeeze(pair) if single else pair


def _perspective_dtilde(D_sharp, u, v, m):
    if not isinstance(D_sharp, Tensor):
        return kernels.persp_dtilde_forward(np.asarray(D_sharp, dtype=np.float64), u, v, m)
    out = kernels.persp_dtilde_forward(D_sharp.data, u, v, m)
    return custom_op("perspective_dtilde", out, (D_sharp,),
                     lambda g: (kernels.persp_dtilde_backward(g, u, v, m),))


def normalize_perspective(obs, D_sharp) -> NormalizedPair:
    """Perspective pair on the unit focal plane; rows interleave u and v."""
    batch, single = _as_batch(obs)
    if batch.t_z is None or np.any(batch.t_z <= 0):
        raise NonPositiveTz("perspective normalisation needs t_z > 0")
    vis = batch.vis
    nvis = _visible_counts(vis)
    u, v = batch.W[..., 0], batch.W[..., 1]
    u_bar = (vis * u).sum(axis=1) / nvis
    v_bar = (vis * v).sum(axis=1) / nvis
    tz = batch.t_z[:, None]
    W_tilde = np.stack([(u - u_bar[:, None]) * tz, (v - v_bar[:, None]) * tz], axis=-1)
    N, P = u.shape
    W_tilde = W_tilde.reshape(N, 2 * P, 1)
    mask = np.repeat(vis, 2, axis=1)[:, :, None]
    D_tilde = _perspective_dtilde(D_sharp, np.ascontiguousarray(u), np.ascontiguousarray(v),
                                  np.ascontiguousarray(vis))
    pair = NormalizedPair(W_tilde, D_tilde, mask, Camera.PERSPECTIVE)
    return _squeeze(pair) if single else pair


def normalize(obs, D_sharp, camera) -> NormalizedPair:
    if as_camera(camera) is Camera.ORTHOGONAL:
        return normalize_orthogonal(obs, D_sharp)
    return normalize_perspective(obs, D_sharp)


def stack_block_code(phi, R, camera):
    """Kronecker block code in the layout the normalised dictionary expects.

    ``phi`` is ``(..., K)``; ``R`` is ``(..., 3, 3)`` or, for the orthogonal
    camera, may already be the ``3 x 2`` frame. Returns ``(..., 3K, 2)`` for
    the orthogonal camera and ``(..., 9K, 1)`` for the perspective camera.
    Differentiable when either input is a :class:`Tensor`.
    """
    camera = as_camera(camera)
    differentiable = isinstance(phi, Tensor) or isinstance(R, Tensor)
    if not differentiable:
        phi = Tensor._wrap(np.asarray(phi, dtype=np.float64), False)
        R = Tensor._wrap(np.asarray(R, dtype=np.float64), False)
    elif not isinstance(phi, Tensor):
        phi = Tensor._wrap(np.asarray(phi, dtype=np.float64), False)
    elif not isinstance(R, Tensor):
        R = Tensor._wrap(np.asarray(R, dtype=np.float64), False)
    a = camera.block_width
    if R.shape[-1] != a:
        if camera is Camera.ORTHOGONAL and R.shape[-1] == 3:
            R = transpose(row_select(transpose(R), [0, 1]))
        else:
            raise ShapeError(f"rotation block has width {R.shape[-1]}, expected {a}")
    lead = phi.shape[:-1]
    K = phi.shape[-1]
    outer = matmul(reshape(phi, (*lead, K, 1)), reshape(R, (*lead, 1, 3 * a)))
    psi = reshape(outer, (*lead, 3 * K, a))
    if camera is Camera.PERSPECTIVE:
        psi = reshape(transpose(psi), (*lead, 9 * K, 1))
    return psi if differentiable else psi.data


def unstack_perspective_code(vec):
    """Inverse of the perspective vectorisation: ``(..., 9K[, 1])`` to ``(..., 3K, 3)``."""
    if isinstance(vec, Tensor):
        lead = vec.shape[:-2] if vec.shape[-1] == 1 else vec.shape[:-1]
        n = vec.shape[-2] if vec.shape[-1] == 1 else vec.shape[-1]
        return transpose(reshape(vec, (*lead, 3, n // 3)))
    arr = np.asarray(vec)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    return np.swapaxes(arr.reshape(*arr.shape[:-1], 3, arr.shape[-1] // 3), -1, -2)


def bilinear_residual(pair: NormalizedPair, psi_tilde) -> np.ndarray:
    """Relative masked residual ``|M(W~ - D~ Psi~)| / |M W~|`` per sample."""
    D = pair.D_tilde.data if isinstance(pair.D_tilde, Tensor) else pair.D_tilde
    psi = psi_tilde.data if isinstance(psi_tilde, Tensor) else np.asarray(psi_tilde)
    res = pair.mask * (pair.W_tilde - D @ psi)
    num = np.sqrt(np.sum(res ** 2, axis=(-1, -2)))
    den = np.sqrt(np.sum(pair.masked_W ** 2, axis=(-1, -2)))
    return num / np.where(den > 0, den, 1.0)
