"""Camera models, rotations and translation recovery.

Shapes are stored as ``P x 3`` arrays with one point per row, and rotations
act on the right: a canonical shape ``S`` appears in the camera frame as
``S @ R + t``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .diffmath import Tensor, custom_op
from .errors import AllOccluded, DegenerateSpectrum, NonPositiveDepth, ShapeError

# relative singular-value tolerances
DEGENERATE_TOL = 1e-8
GRADIENT_GAP_TOL = 1e-6


class Camera(str, enum.Enum):
    ORTHOGONAL = "ortho"
    PERSPECTIVE = "persp"

    @property
    def block_width(self) -> int:
        return 2 if self is Camera.ORTHOGONAL else 3


def as_camera(value) -> Camera:
    if isinstance(value, Camera):
        return value
    aliases = {"orthogonal": "ortho", "perspective": "persp"}
    return Camera(aliases.get(str(value), str(value)))


@dataclass
class PoseEstimate:
    """Canonical shape, rotation, translation and last-layer shape code."""

    S: np.ndarray
    R: np.ndarray
    t: np.ndarray
    phi_L: np.ndarray

    def camera_shape(self) -> np.ndarray:
        return self.S @ self.R + self.t[None, :]

    def to_dict(self) -> dict:
        return {"S": self.S.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "phi_L": self.phi_L.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseEstimate":
        return cls(np.asarray(d["S"], float), np.asarray(d["R"], float),
                   np.asarray(d["t"], float), np.asarray(d["phi_L"], float))


def project(S_cam, camera) -> np.ndarray:
    S_cam = np.asarray(S_cam, dtype=np.float64)
    camera = as_camera(camera)
    if S_cam.shape[-1] != 3:
        raise ShapeError("expected points with 3 coordinates")
    if camera is Camera.ORTHOGONAL:
        return S_cam[..., :2].copy()
    z = S_cam[..., 2:3]
    if np.any(z <= 0):
        raise NonPositiveDepth("perspective projection needs strictly positive depth")
    return S_cam[..., :2] / z


def apply_intrinsics(points_px, K) -> np.ndarray:
    """Map pixel coordinates onto the unit focal plane using a 3x3 intrinsic matrix."""
    pts = np.asarray(points_px, dtype=np.float64)
    homog = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)
    rays = homog @ np.linalg.inv(np.asarray(K, dtype=np.float64)).T
    return rays[..., :2] / rays[..., 2:3]


def random_rotation(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform rotations from normalised Gaussian quaternions."""
    q = rng.standard_normal((1 if n is None else n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)
    return R[0] if n is None else R


def complete_rotation(R_xy) -> np.ndarray:
    """Append the third column ``r1 x r2`` to an orthonormal 3x2 frame."""
    R_xy = np.asarray(R_xy, dtype=np.float64)
    r3 = np.cross(R_xy[..., :, 0], R_xy[..., :, 1])
    return np.concatenate([R_xy, r3[..., None]], axis=-1)


def recover_translation_perspective(W, vis, rotated, t_z: float) -> np.ndarray:
    """Translation ``(t_x, t_y)`` from the object-centric constraint.

    ``rotated`` is the canonical shape after rotation (``S @ R``); its x column
    stands in for occluded points and its z column gives the relative depth.
    With every point visible this is the mean of the back-projected points.
    """
    W = np.asarray(W, dtype=np.float64)
    m = np.asarray(vis, dtype=np.float64)
    rotated = np.asarray(rotated, dtype=np.float64)
    nvis = m.sum()
    if nvis <= 0:
        raise AllOccluded("no visible keypoint")
    depth = rotated[:, 2] + t_z
    back = W * depth[:, None]
    t = (m[:, None] * back + (1.0 - m)[:, None] * rotated[:, :2]).sum(axis=0) / nvis
    return t


def recover_translation_orthogonal(W, vis, rotated_xy) -> np.ndarray:
    """Translation ``t_xy`` under orthogonal projection with missing points."""
    W = np.asarray(W, dtype=np.float64)
    m = np.asarray(vis, dtype=np.float64)
    nvis = m.sum()
    if nvis <= 0:
        raise AllOccluded("no visible keypoint")
    rotated_xy = np.asarray(rotated_xy, dtype=np.float64)
    return (m[:, None] * W + (1.0 - m)[:, None] * rotated_xy).sum(axis=0) / nvis


def _warn_degenerate(flags, what):
    if np.any(flags):
        warnings.warn(f"{what}: singular spectrum is degenerate, projection not unique",
                      DegenerateSpectrum, stacklevel=3)


def _so3_parts(A):
    U, s, Vt = np.linalg.svd(A)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    s_signed = s.copy()
    s_signed[..., 2] *= d
    R = U @ Vt
    scale = np.maximum(s[..., 0], np.finfo(float).tiny)
    flip = d < 0
    degenerate = (flip & (s[..., 1] - s[..., 2] <= DEGENERATE_TOL * scale)) | \
                 (s[..., 1] <= DEGENERATE_TOL * scale)
    return U, s_signed, Vt, R, degenerate


def project_so3(A):
    """Nearest rotation to ``A`` in Frobenius norm.

    The sign correction flips the direction of the smallest singular value.
    Accepts a batch ``(..., 3, 3)``. When given a :class:`Tensor` the result
    is differentiable; see :func:`_procrustes_backward_so3` for the rule.
    """
    data = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    if data.shape[-2:] != (3, 3):
        raise ShapeError("project_so3 expects 3x3 matrices")
    U, s_signed, Vt, R, degenerate = _so3_parts(data)
    _warn_degenerate(degenerate, "project_so3")
    if not isinstance(A, Tensor):
        return R
    den = s_signed[..., :, None] + s_signed[..., None, :]
    off = ~np.eye(3, dtype=bool)
    scale = np.maximum(np.abs(s_signed[..., :1]), np.finfo(float).tiny)[..., None]
    closed = np.all((den > GRADIENT_GAP_TOL * scale) | ~off, axis=(-1, -2))
    meta = {"mode": np.where(closed, "closed_form", "straight_through")}

    def backward(g):
        Gt = np.swapaxes(U, -1, -2) @ g @ np.swapaxes(Vt, -1, -2)
        safe = np.where(off & (den > 0), den, 1.0)
        M = np.where(off, (Gt - np.swapaxes(Gt, -1, -2)) / safe, 0.0)
        ga = U @ M @ Vt
        return (np.where(closed[..., None, None], ga, g),)

    return custom_op("project_so3", R, (A,), backward, meta)


def project_stiefel_3x2(A):
    """Nearest 3x2 matrix with orthonormal columns (``U V^T`` of a thin SVD)."""
    data = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    if data.shape[-2:] != (3, 2):
        raise ShapeError("project_stiefel_3x2 expects 3x2 matrices")
    U, s, Vt = np.linalg.svd(data, full_matrices=False)
    Q = U @ Vt
    scale = np.maximum(s[..., 0], np.finfo(float).tiny)
    _warn_degenerate(s[..., 1] <= DEGENERATE_TOL * scale, "project_stiefel_3x2")
    if not isinstance(A, Tensor):
        return Q
    closed = s[..., 1] > GRADIENT_GAP_TOL * scale
    meta = {"mode": np.where(closed, "closed_form", "straight_through")}
    off = ~np.eye(2, dtype=bool)

    def backward(g):
        V = np.swapaxes(Vt, -1, -2)
        Ut = np.swapaxes(U, -1, -2)
        Gt = Ut @ g @ V
        den = s[..., :, None] + s[..., None, :]
        M = np.where(off, (Gt - np.swapaxes(Gt, -1, -2)) / np.where(den > 0, den, 1.0), 0.0)
        inv_s = np.where(closed[..., None], 1.0 / np.where(s > 0, s, 1.0), 0.0)
        perp = g - U @ (Ut @ g)
        ga = U @ M @ Vt + (perp @ V) * inv_s[..., None, :] @ Vt
        return (np.where(closed[..., None, None], ga, g),)

    return custom_op("project_stiefel_3x2", Q, (A,), backward, meta)


def is_rotation(R, tol: float = 1e-10) -> bool:
    R = np.asarray(R)
    eye = np.eye(3)
    return bool(np.all(np.abs(np.swapaxes(R, -1, -2) @ R - eye) < tol)
                and np.all(np.abs(np.linalg.det(R) - 1.0) < tol))
