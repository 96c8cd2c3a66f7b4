"""Encoder-decoder lifting network induced by hierarchical block-sparse coding.

Encoder: one unrolled block-ISTA step per level,

    Psi_1 = BST(reshape(D~1^T M W~); lam_1)
    Psi_l = BST((D_l (x) I3)^T Psi_{l-1}; lam_l)        l = 2..L

followed by a rank-one factorisation ``Psi_L ~ phi_L (x) R``. Decoder, with
the same dictionaries:

    phi_{l-1} = ReLU(D_l phi_l + b_l),    S = D_1 phi_1.

The training signal is the masked reprojection ``|M (W~ - D~1 Psi~)|_F`` with
``Psi~`` built from the decoded ``phi_1`` and the encoder's rotation, so the
decoder dictionaries and biases receive gradient too.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffmath import (Tensor, custom_op, kron_apply_t, masked_frobenius, matmul, relu,
                       reshape, scale, softplus, sub, add, transpose)
from .errors import RegimeMismatch, ShapeError, ZeroCode, ZeroCodeWarning
from .geometry import (Camera, PoseEstimate, as_camera, complete_rotation, project_so3,
                       project_stiefel_3x2, recover_translation_orthogonal,
                       recover_translation_perspective)
from .normalization import (NormalizedPair, Observation, ObservationBatch, dsharp_from_d1,
                            normalize, stack_block_code, unstack_perspective_code)
from .sparse import bst

# Relative size below which the last-layer code counts as zero.
ZERO_CODE_TOL = 1e-12
# Relative eigen-gap below which the leading singular vector is ambiguous.
TIE_TOL = 1e-10


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class ModelConfig:
    P: int
    dict_sizes: tuple
    camera: Camera = Camera.ORTHOGONAL
    relu_encoder: bool = False
    code_level: str = "phi1"     # "phi1" (decoded) or "phiL" (linear decode of phi_L)

    def __post_init__(self):
        self.dict_sizes = tuple(int(k) for k in self.dict_sizes)
        self.camera = as_camera(self.camera)
        if not self.dict_sizes or min(self.dict_sizes) < 1 or self.P < 1:
            raise ShapeError("dictionary sizes and P must be positive")
        if self.code_level not in ("phi1", "phiL"):
            raise ValueError("code_level must be 'phi1' or 'phiL'")

    @property
    def L(self) -> int:
        return len(self.dict_sizes)

    @property
    def block_width(self) -> int:
        return self.camera.block_width

    def to_dict(self) -> dict:
        return {"P": self.P, "dict_sizes": list(self.dict_sizes), "camera": self.camera.value,
                "relu_encoder": self.relu_encoder, "code_level": self.code_level}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(int(d["P"]), tuple(d["dict_sizes"]), d["camera"],
                   bool(d.get("relu_encoder", False)), d.get("code_level", "phi1"))


class ModelParams:
    """Hierarchical dictionaries, raw thresholds and decoder biases.

    ``D[0]`` is ``D1`` (``3P x K1``); ``D[l]`` is ``K_l x K_{l+1}`` (0-based).
    ``lam_raw[l]`` maps to thresholds through softplus. ``bias[l]`` for
    ``l >= 1`` is the ``K_{l-1} x 1`` bias added after ``D[l]`` in the decoder;
    ``bias[0]`` is unused and kept as ``None``.
    """

    def __init__(self, config: ModelConfig, D, lam_raw, bias):
        self.config = config
        self.D = [self._param(d) for d in D]
        self.lam_raw = [self._param(l) for l in lam_raw]
        self.bias = [None] + [self._param(b) for b in bias[1:]]
        self._validate()

    @staticmethod
    def _param(x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        return Tensor(data, requires_grad=True)

    def _validate(self):
        c = self.config
        ks = c.dict_sizes
        if self.D[0].shape != (3 * c.P, ks[0]):
            raise ShapeError(f"D1 must be {3 * c.P} x {ks[0]}, got {self.D[0].shape}")
        for l in range(1, c.L):
            if self.D[l].shape != (ks[l - 1], ks[l]):
                raise ShapeError(f"D{l + 1} must be {ks[l - 1]} x {ks[l]}")
            if self.bias[l].shape != (ks[l - 1], 1):
                raise ShapeError(f"b{l + 1} must be {ks[l - 1]} x 1")
        for l in range(c.L):
            if self.lam_raw[l].shape != (ks[l],):
                raise ShapeError(f"lambda{l + 1} must have length {ks[l]}")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, lam_init: float = 1e-3) -> "ModelParams":
        """Uniform ``[-s, s]`` entries with ``s = sqrt(3 / fan_in)``; zero biases."""
        rng = np.random.default_rng(seed)
        ks = config.dict_sizes
        shapes = [(3 * config.P, ks[0])] + [(ks[l - 1], ks[l]) for l in range(1, config.L)]
        D = [rng.uniform(-1, 1, s) * np.sqrt(3.0 / s[1]) for s in shapes]
        lam = [np.full(k, softplus_inverse(max(lam_init, 1e-300))) for k in ks]
        bias = [None] + [np.zeros((ks[l - 1], 1)) for l in range(1, config.L)]
        return cls(config, D, lam, bias)

    @classmethod
    def from_dictionaries(cls, config: ModelConfig, D, thresholds=None, bias=None) -> "ModelParams":
        """Build parameters from explicit dictionaries (e.g. a generator's ground truth)."""
        ks = config.dict_sizes
        if thresholds is None:
            lam = [np.full(k, -50.0) for k in ks]   # softplus(-50) ~ 2e-22
        else:
            lam = [softplus_inverse(np.maximum(np.broadcast_to(t, (k,)), 1e-300))
                   for t, k in zip(thresholds, ks)]
        if bias is None:
            bias = [None] + [np.zeros((ks[l - 1], 1)) for l in range(1, config.L)]
        return cls(config, D, lam, bias)

    @property
    def D_sharp(self) -> np.ndarray:
        return dsharp_from_d1(self.D[0].data)

    def thresholds(self) -> list[np.ndarray]:
        return [np.logaddexp(0.0, l.data) for l in self.lam_raw]

    def tensors(self) -> list[Tensor]:
        return self.D + self.lam_raw + self.bias[1:]

    def names(self) -> list[str]:
        L = self.config.L
        return ([f"D{l + 1}" for l in range(L)] + [f"lambda{l + 1}" for l in range(L)]
                + [f"b{l + 1}" for l in range(1, L)])

    def arrays(self) -> dict:
        return {n: t.data for n, t in zip(self.names(), self.tensors())}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict) -> "ModelParams":
        L = config.L
        D = [arrays[f"D{l + 1}"] for l in range(L)]
        lam = [arrays[f"lambda{l + 1}"] for l in range(L)]
        bias = [None] + [arrays[f"b{l + 1}"] for l in range(1, L)]
        return cls(config, D, lam, bias)

    def replace(self, new_tensors) -> "ModelParams":
        """Same configuration with parameter arrays taken from ``new_tensors`` (ordered as ``tensors()``)."""
        L = self.config.L
        new = list(new_tensors)
        return ModelParams(self.config, new[:L], new[L:2 * L], [None] + new[2 * L:])

    def copy(self) -> "ModelParams":
        return self.replace([t.data.copy() for t in self.tensors()])


def leading_singular_vector(G) -> Tensor:
    """Leading right singular vector of each ``K x m`` matrix in a batch.

    The sign is fixed so that ``sum(G v) >= 0``. Differentiable through the
    eigen-decomposition of ``G^T G``; directions whose eigen-gap to the top
    value is below ``TIE_TOL`` (relative) are dropped from the derivative.
    """
    g = G.data if isinstance(G, Tensor) else np.asarray(G, dtype=np.float64)
    A = np.swapaxes(g, -1, -2) @ g
    w, V = np.linalg.eigh(A)
    v1 = V[..., :, -1]
    s = np.sign(np.einsum("...km,...m->...", g, v1))
    v1 = v1 * np.where(s == 0, 1.0, s)[..., None]
    top = np.maximum(w[..., -1], np.finfo(float).tiny)
    gaps = w[..., -1:] - w[..., :-1]
    resolved = gaps > TIE_TOL * top[..., None]
    tied = ~resolved[..., -1] & (w[..., -1] > 0)
    if np.any(tied):
        warnings.warn("leading singular value is tied; factorisation picks one arbitrarily",
                      RuntimeWarning, stacklevel=2)
    if not isinstance(G, Tensor):
        return v1
    Vr = V[..., :, :-1]

    def backward(gv):
        c = np.einsum("...mj,...m->...j", Vr, gv)
        c = np.where(resolved, c / np.where(resolved, gaps, 1.0), 0.0)
        u = np.einsum("...mj,...j->...m", Vr, c)
        gA = u[..., :, None] * v1[..., None, :]
        return (g @ (gA + np.swapaxes(gA, -1, -2)),)

    return custom_op("leading_singular_vector", v1, (G,), backward, {"tied": tied})


@dataclass
class Factorization:
    phi_L: object          # (N, K_L) Tensor or array
    R_block: object        # (N, 3, a) projected rotation block
    R: np.ndarray          # (N, 3, 3) full rotation
    zero: np.ndarray       # (N,) samples whose code vanished


def factorize_block_code(psi_L, camera) -> Factorization:
    """Split ``Psi_L`` (``(N, 3K, a)``) into a shape code and a rotation.

    Rows of ``G`` (``K x 3a``) are the flattened blocks; the leading right
    singular vector reshaped to ``3 x a`` is projected onto SO(3) (or onto
    orthonormal frames for ``a = 2``), and ``phi_L = G vec(R) / a`` is the
    least-squares code for that rotation.
    """
    camera = as_camera(camera)
    a = camera.block_width
    differentiable = isinstance(psi_L, Tensor)
    shape = psi_L.shape
    if shape[-1] != a or shape[-2] % 3:
        raise ShapeError(f"block code shape {shape} does not match block width {a}")
    lead, K = shape[:-2], shape[-2] // 3
    G = reshape(psi_L, (*lead, K, 3 * a)) if differentiable else np.asarray(psi_L).reshape(*lead, K, 3 * a)
    gdata = G.data if differentiable else G
    norms = np.sqrt(np.sum(gdata ** 2, axis=(-1, -2)))
    zero = norms <= ZERO_CODE_TOL * np.maximum(1.0, np.max(norms, initial=0.0))
    v = leading_singular_vector(G)
    Vm = reshape(v, (*lead, 3, a)) if differentiable else v.reshape(*lead, 3, a)
    with warnings.catch_warnings():
        if np.any(zero):
            warnings.simplefilter("ignore")
        Rb = project_stiefel_3x2(Vm) if a == 2 else project_so3(Vm)
    rdata = Rb.data if differentiable else Rb
    if differentiable:
        phi = scale(reshape(matmul(G, reshape(Rb, (*lead, 3 * a, 1))), (*lead, K)), 1.0 / a)
    else:
        phi = (G @ Rb.reshape(*lead, 3 * a, 1)).reshape(*lead, K) / a
    R = complete_rotation(rdata) if a == 2 else rdata
    return Factorization(phi, Rb, R, zero)


def _expand_rows(lam: Tensor, K: int) -> Tensor:
    E = np.kron(np.eye(K), np.ones((3, 1)))            # (3K, K)
    return matmul(E, reshape(lam, (K, 1)))


def _nonlinearity(x: Tensor, lam: Tensor, relu_encoder: bool) -> Tensor:
    if not relu_encoder:
        return bst(x, lam)
    K = x.shape[-2] // 3
    return relu(sub(x, _expand_rows(lam, K)))


def encode(pair: NormalizedPair, params: ModelParams) -> list:
    """Block codes ``Psi_1 .. Psi_L`` for a batched normalised pair."""
    cfg = params.config
    if pair.camera is not cfg.camera:
        raise RegimeMismatch(f"pair is {pair.camera.value}, model is {cfg.camera.value}")
    D_tilde = pair.D_tilde
    if not isinstance(D_tilde, Tensor):
        D_tilde = Tensor._wrap(np.asarray(D_tilde), False)
    if D_tilde.shape[-1] != cfg.dict_sizes[0] * 3 * (3 if cfg.camera is Camera.PERSPECTIVE else 1):
        raise ShapeError("normalised dictionary does not match the first dictionary size")
    x = matmul(transpose(D_tilde), pair.masked_W)
    if cfg.camera is Camera.PERSPECTIVE:
        x = unstack_perspective_code(x)
    lams = [softplus(l) for l in params.lam_raw]
    psis = [_nonlinearity(x, lams[0], cfg.relu_encoder)]
    for l in range(1, cfg.L):
        psis.append(_nonlinearity(kron_apply_t(params.D[l], psis[-1]), lams[l], cfg.relu_encoder))
    return psis


def decode(phi_L, params: ModelParams):
    """Decode ``(N, K_L)`` codes to shapes ``(N, P, 3)``; also returns ``[phi_1 .. phi_L]``."""
    cfg = params.config
    phi = phi_L if isinstance(phi_L, Tensor) else Tensor._wrap(np.asarray(phi_L, dtype=np.float64), False)
    lead = phi.shape[:-1]
    col = reshape(phi, (*lead, phi.shape[-1], 1))
    phis = [col]
    for l in range(cfg.L - 1, 0, -1):
        col = relu(add(matmul(params.D[l], col), params.bias[l]))
        phis.insert(0, col)
    S = reshape(matmul(params.D[0], phis[0]), (*lead, cfg.P, 3))
    return S, [reshape(p, (*lead, p.shape[-2])) for p in phis]


def _linear_decode(phi_L: Tensor, params: ModelParams) -> Tensor:
    lead = phi_L.shape[:-1]
    col = reshape(phi_L, (*lead, phi_L.shape[-1], 1))
    for l in range(params.config.L - 1, 0, -1):
        col = matmul(params.D[l], col)
    return reshape(col, (*lead, col.shape[-2]))


@dataclass
class ForwardResult:
    pair: NormalizedPair
    psis: list
    fact: Factorization
    S: Tensor
    phis: list
    psi_tilde: Tensor
    reprojection: Tensor
    sample_loss: Tensor        # (N,) masked Frobenius norms
    valid: np.ndarray          # (N,) False where the code vanished


def forward(batch: ObservationBatch, params: ModelParams) -> ForwardResult:
    cfg = params.config
    if batch.W.shape[1] != cfg.P:
        raise ShapeError(f"observations have {batch.W.shape[1]} points, model expects {cfg.P}")
    dsharp = dsharp_from_d1(params.D[0])
    pair = normalize(batch, dsharp, cfg.camera)
    psis = encode(pair, params)
    fact = factorize_block_code(psis[-1], cfg.camera)
    S, phis = decode(fact.phi_L, params)
    code = phis[0] if cfg.code_level == "phi1" else _linear_decode(fact.phi_L, params)
    psi_tilde = stack_block_code(code, fact.R_block, cfg.camera)
    reproj = matmul(pair.D_tilde, psi_tilde)
    loss = masked_frobenius(sub(pair.W_tilde, reproj), pair.mask)
    return ForwardResult(pair, psis, fact, S, phis, psi_tilde, reproj, loss, ~fact.zero)


@dataclass
class LiftOutput:
    pose: PoseEstimate
    psis: list = field(repr=False)
    phis: list = field(repr=False)
    reprojection: np.ndarray = field(repr=False)
    W_tilde: np.ndarray = field(repr=False)
    loss: float = 0.0


def _pose(obs_W, vis, t_z, S, R, phi_L, camera) -> PoseEstimate:
    rotated = S @ R
    if camera is Camera.ORTHOGONAL:
        txy = recover_translation_orthogonal(obs_W, vis, rotated[:, :2])
        t = np.array([txy[0], txy[1], 0.0])
    else:
        txy = recover_translation_perspective(obs_W, vis, rotated, t_z)
        t = np.array([txy[0], txy[1], t_z])
    return PoseEstimate(S, R, t, phi_L)


def lift_batch(batch: ObservationBatch, params: ModelParams, strict: bool = True) -> list:
    """Lift every sample; with ``strict=False`` vanished codes yield ``None`` entries."""
    res = forward(batch, params)
    out = []
    for i in range(len(batch)):
        if res.fact.zero[i]:
            if strict:
                raise ZeroCode(f"sample {i}: last-layer block code vanished")
            warnings.warn(f"sample {i}: last-layer block code vanished", ZeroCodeWarning)
            out.append(None)
            continue
        S = res.S.data[i]
        R = res.fact.R[i]
        phi_L = np.asarray(res.fact.phi_L.data[i])
        tz = None if batch.t_z is None else float(batch.t_z[i])
        pose = _pose(batch.W[i], batch.vis[i], tz, S, R, phi_L, params.config.camera)
        out.append(LiftOutput(pose, [p.data[i] for p in res.psis], [p.data[i] for p in res.phis],
                              res.reprojection.data[i], res.pair.W_tilde[i],
                              float(res.sample_loss.data[i])))
    return out


def lift(obs, params: ModelParams) -> LiftOutput:
    """Lift one observation to a pose estimate."""
    batch = ObservationBatch.stack([obs]) if isinstance(obs, Observation) else obs
    return lift_batch(batch, params)[0]
