"""Datasets: JSON-lines storage, t_z initialisation and a synthetic scene generator.

File layout: the first line is a header object, every further line one
sample record::

    {"format": "deepnrsfm-dataset", "version": "1.0", "P": 20, "units": "unit_focal"}
    {"points2d": [[u, v], ...], "vis": [1, 0, ...], "t_z": 3.1, "gt3d": [[x, y, z], ...]}

Floats are written with Python's shortest round-trip repr, so save/load is
lossless. Unknown keys in the header or in records are kept and written back.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, MissingBBox, SchemaError, VersionError
from .geometry import Camera, apply_intrinsics, as_camera, project, random_rotation
from .model import ModelConfig, ModelParams
from .normalization import ObservationBatch, d1_from_dsharp

FORMAT = "deepnrsfm-dataset"
VERSION = "1.0"
UNITS = ("unit_focal", "pixels")

_KNOWN = {"points2d", "vis", "gt3d", "bbox", "intrinsics", "t_z"}


@dataclass
class SampleRecord:
    points2d: np.ndarray
    vis: np.ndarray
    gt3d: np.ndarray | None = None
    bbox: tuple | None = None
    intrinsics: np.ndarray | None = None
    t_z: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"points2d": np.asarray(self.points2d).tolist(),
               "vis": [int(v) for v in self.vis]}
        if self.gt3d is not None:
            out["gt3d"] = np.asarray(self.gt3d).tolist()
        if self.bbox is not None:
            out["bbox"] = [float(b) for b in self.bbox]
        if self.intrinsics is not None:
            out["intrinsics"] = np.asarray(self.intrinsics).tolist()
        if self.t_z is not None:
            out["t_z"] = float(self.t_z)
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, obj: dict, P: int, line: int | None = None) -> "SampleRecord":
        if not isinstance(obj, dict):
            raise SchemaError("record must be a JSON object", line)
        for key in ("points2d", "vis"):
            if key not in obj:
                raise SchemaError(f"missing required field '{key}'", line)
        try:
            pts = np.asarray(obj["points2d"], dtype=np.float64)
            vis = np.asarray(obj["vis"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"malformed array: {exc}", line) from exc
        if pts.shape != (P, 2):
            raise SchemaError(f"points2d must be {P} x 2, got {pts.shape}", line)
        if vis.shape != (P,) or not np.all((vis == 0) | (vis == 1)):
            raise SchemaError("vis must hold P flags in {0, 1}", line)
        gt3d = obj.get("gt3d")
        if gt3d is not None:
            gt3d = np.asarray(gt3d, dtype=np.float64)
            if gt3d.shape != (P, 3):
                raise SchemaError(f"gt3d must be {P} x 3", line)
        bbox = obj.get("bbox")
        if bbox is not None:
            if len(bbox) != 4:
                raise SchemaError("bbox must be [x_min, y_min, x_max, y_max]", line)
            bbox = tuple(float(b) for b in bbox)
        K = obj.get("intrinsics")
        if K is not None:
            K = np.asarray(K, dtype=np.float64)
            if K.shape != (3, 3):
                raise SchemaError("intrinsics must be 3 x 3", line)
        tz = obj.get("t_z")
        extra = {k: v for k, v in obj.items() if k not in _KNOWN}
        return cls(pts, vis, gt3d, bbox, K, None if tz is None else float(tz), extra)


@dataclass
class Dataset:
    P: int
    records: list
    units: str = "unit_focal"
    skeleton: list | None = None
    header_extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def header(self) -> dict:
        h = {"format": FORMAT, "version": VERSION, "P": self.P, "units": self.units}
        if self.skeleton is not None:
            h["skeleton"] = [list(map(int, e)) for e in self.skeleton]
        h.update(self.header_extra)
        return h

    def observations(self, camera=Camera.ORTHOGONAL, indices=None) -> ObservationBatch:
        """Stack records into a batch; pixel records with intrinsics are mapped to the focal plane."""
        camera = as_camera(camera)
        recs = self.records if indices is None else [self.records[i] for i in indices]
        W = []
        for r in recs:
            pts = np.asarray(r.points2d, dtype=np.float64)
            if self.units == "pixels" and r.intrinsics is not None:
                pts = apply_intrinsics(pts, r.intrinsics)
            W.append(np.where(np.asarray(r.vis)[:, None] > 0, pts, 0.0))
        vis = np.stack([np.asarray(r.vis, dtype=np.float64) for r in recs])
        tz = None
        if camera is Camera.PERSPECTIVE:
            if any(r.t_z is None for r in recs):
                raise ConfigError("perspective camera needs t_z on every record (see init_tz)")
            tz = np.array([r.t_z for r in recs], dtype=np.float64)
        return ObservationBatch(np.stack(W), vis, tz)

    def ground_truth(self, indices=None) -> np.ndarray:
        recs = self.records if indices is None else [self.records[i] for i in indices]
        if any(r.gt3d is None for r in recs):
            raise ConfigError("dataset has no 3D ground truth")
        return np.stack([r.gt3d for r in recs])


def _check_version(version, line=1):
    try:
        major = int(str(version).split(".")[0])
    except ValueError as exc:
        raise SchemaError(f"bad version string {version!r}", line) from exc
    if major > int(VERSION.split(".")[0]):
        raise VersionError(f"file version {version} is newer than supported {VERSION}", line)


def save(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset.header()) + "\n")
        for r in dataset.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", 1) from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise SchemaError(f"header must declare format '{FORMAT}'", 1)
    _check_version(header.get("version", "0"))
    if "P" not in header:
        raise SchemaError("header is missing P", 1)
    P = int(header["P"])
    units = header.get("units", "unit_focal")
    if units not in UNITS:
        raise SchemaError(f"units must be one of {UNITS}", 1)
    records = []
    for no, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", no) from exc
        records.append(SampleRecord.from_json(obj, P, no))
    extra = {k: v for k, v in header.items() if k not in ("format", "version", "P", "units", "skeleton")}
    return Dataset(P, records, units, header.get("skeleton"), extra)


def init_tz(record: SampleRecord, rule: str = "inv_max_bbox", value: float | None = None) -> float:
    """Initial object depth from the 2D bounding box.

    ``inv_max_bbox``: ``1 / max(h, w)``; ``inv_min_bbox``: ``1 / min(h, w)``;
    ``fixed``: ``value``. The result is also stored on the record.
    """
    if rule == "fixed":
        if value is None or value <= 0:
            raise ConfigError("fixed t_z needs a positive value")
        tz = float(value)
    else:
        if record.bbox is None:
            raise MissingBBox("record has no bounding box")
        x0, y0, x1, y1 = record.bbox
        w, h = x1 - x0, y1 - y0
        if not (w > 0 and h > 0):
            raise MissingBBox(f"degenerate bounding box {record.bbox}")
        if rule == "inv_max_bbox":
            tz = 1.0 / max(w, h)
        elif rule == "inv_min_bbox":
            tz = 1.0 / min(w, h)
        else:
            raise ConfigError(f"unknown t_z rule {rule!r}")
    record.t_z = tz
    return tz


def bbox_of(points2d, vis) -> tuple:
    pts = np.asarray(points2d)[np.asarray(vis) > 0]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    """Parameters of the synthetic scene generator.

    Shapes are ``S = D1 D2 ... DL phi_L`` with sparse nonnegative ``phi_L``
    and nonnegative sparse ``D2..DL``; the composite basis is centred (and
    orthonormal in its ``P x 3K_L`` reshape when ``3 K_L < P``), so every
    shape has its centroid at the origin. Perspective depth is
    ``depth_ratio`` times the sample's largest point radius; ``tz_jitter``
    multiplies the recorded ``t_z`` by a log-uniform factor in
    ``[1/sqrt(j), sqrt(j)]`` while the ground truth keeps the true depth.
    """

    P: int = 20
    dict_sizes: tuple = (16, 8, 4)
    code_sparsity: int = 2
    column_sparsity: int = 2
    camera: str = "ortho"
    N: int = 1000
    radius: float = 1.0
    unit_code_norm: bool = False
    depth_ratio: tuple = (3.0, 3.0)
    translation_xy: float = 0.1
    occlusion_rate: float = 0.0
    min_visible: int = 3
    noise_std: float = 0.0
    tz_jitter: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.dict_sizes = tuple(int(k) for k in self.dict_sizes)
        self.depth_ratio = tuple(float(d) for d in np.broadcast_to(self.depth_ratio, (2,)))
        if self.min_visible > self.P:
            raise ConfigError("min_visible exceeds the number of points")
        if not 0 <= self.occlusion_rate <= 1:
            raise ConfigError("occlusion_rate must lie in [0, 1]")
        if self.code_sparsity < 1 or self.code_sparsity > self.dict_sizes[-1]:
            raise ConfigError("code_sparsity must be between 1 and K_L")
        if self.column_sparsity < 1 or any(self.column_sparsity > k for k in self.dict_sizes[:-1]):
            raise ConfigError("column_sparsity exceeds a dictionary size")
        if as_camera(self.camera) is Camera.PERSPECTIVE and min(self.depth_ratio) <= 1.0:
            raise ConfigError("depth_ratio must exceed 1 so every depth stays positive")
        if self.N < 1 or self.P < 1:
            raise ConfigError("N and P must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


@dataclass
class SynthTruth:
    """Exact generator quantities for every sample."""

    dictionaries: list          # D1 (3P x K1), D2 .. DL
    phi_L: np.ndarray           # (N, K_L)
    S: np.ndarray               # (N, P, 3) canonical shapes; gt3d holds S R + t
    R: np.ndarray               # (N, 3, 3)
    t: np.ndarray               # (N, 3)
    t_z_true: np.ndarray        # (N,)

    def codes(self) -> list:
        """``[phi_1, ..., phi_L]`` per sample, each ``(N, K_l)``."""
        phis = [self.phi_L]
        for D in reversed(self.dictionaries[1:]):
            phis.insert(0, phis[0] @ D.T)
        return phis

    def params(self, camera) -> ModelParams:
        """The generating dictionaries as model parameters (thresholds near zero)."""
        sizes = tuple(D.shape[1] for D in self.dictionaries)
        config = ModelConfig(self.dictionaries[0].shape[0] // 3, sizes, as_camera(camera))
        return ModelParams.from_dictionaries(config, self.dictionaries)


def _composite_basis(rng, P, K, radius):
    X = rng.standard_normal((P, 3 * K))
    X -= X.mean(axis=0, keepdims=True)
    if 3 * K <= P - 1:
        X, _ = np.linalg.qr(X)
        # unit |phi| gives an RMS point radius of `radius`
        return X * radius * math.sqrt(P / 3.0)
    return X * radius / math.sqrt(3.0 * K)


def _nonneg_sparse(rng, rows, cols, per_col):
    for _ in range(100):
        M = np.zeros((rows, cols))
        for j in range(cols):
            idx = rng.choice(rows, size=per_col, replace=False)
            M[idx, j] = rng.uniform(0.5, 1.0, per_col)
        if np.linalg.matrix_rank(M) == min(rows, cols):
            return M
    raise ConfigError("could not draw a full-rank sparse dictionary; raise column_sparsity")


def generate(config: SynthConfig) -> tuple[Dataset, SynthTruth]:
    cfg = config
    camera = as_camera(cfg.camera)
    rng = np.random.default_rng(cfg.seed)
    ks = cfg.dict_sizes
    L = len(ks)

    Ds = [None] + [_nonneg_sparse(rng, ks[l - 1], ks[l], cfg.column_sparsity) for l in range(1, L)]
    J = np.eye(ks[0])
    for D in Ds[1:]:
        J = J @ D
    if np.linalg.matrix_rank(J) < ks[-1]:
        raise ConfigError("composite dictionary is rank deficient; change sizes or sparsity")
    B = d1_from_dsharp(_composite_basis(rng, cfg.P, ks[-1], cfg.radius))      # 3P x K_L
    Ds[0] = B @ np.linalg.pinv(J)

    N = cfg.N
    phi_L = np.zeros((N, ks[-1]))
    for n in range(N):
        idx = rng.choice(ks[-1], size=cfg.code_sparsity, replace=False)
        phi_L[n, idx] = rng.uniform(0.2, 1.0, cfg.code_sparsity)
    if cfg.unit_code_norm:
        phi_L /= np.linalg.norm(phi_L, axis=1, keepdims=True)
    S = (phi_L @ B.T).reshape(N, cfg.P, 3)
    R = random_rotation(rng, N)
    rotated = S @ R

    t = np.zeros((N, 3))
    t[:, :2] = rng.uniform(-cfg.translation_xy, cfg.translation_xy, (N, 2))
    if camera is Camera.PERSPECTIVE:
        max_r = np.linalg.norm(S, axis=2).max(axis=1)
        t[:, 2] = rng.uniform(*cfg.depth_ratio, N) * max_r
        t[:, :2] *= t[:, 2:3]
    S_cam = rotated + t[:, None, :]
    W = project(S_cam, camera)

    vis = (rng.random((N, cfg.P)) >= cfg.occlusion_rate).astype(np.float64)
    for n in range(N):
        short = cfg.min_visible - int(vis[n].sum())
        if short > 0:
            hidden = np.flatnonzero(vis[n] == 0)
            vis[n, rng.choice(hidden, size=short, replace=False)] = 1.0
    noise = rng.standard_normal(W.shape) * cfg.noise_std
    W = np.where(vis[:, :, None] > 0, W + noise, 0.0)

    if cfg.tz_jitter != 1.0:
        half = 0.5 * math.log(cfg.tz_jitter)
        jitter = np.exp(rng.uniform(-half, half, N))
    else:
        jitter = np.ones(N)

    records = []
    for n in range(N):
        tz = float(t[n, 2] * jitter[n]) if camera is Camera.PERSPECTIVE else None
        records.append(SampleRecord(W[n], vis[n], S_cam[n], bbox_of(W[n], vis[n]), None, tz))
    header = {"camera": camera.value, "generator": cfg.to_dict()}
    dataset = Dataset(cfg.P, records, "unit_focal", None, header)
    truth = SynthTruth(Ds, phi_L, S, R, t, t[:, 2].copy())
    return dataset, truth


def truth_to_json(truth: SynthTruth) -> dict:
    return {"dictionaries": [D.tolist() for D in truth.dictionaries],
            "phi_L": truth.phi_L.tolist(), "R": truth.R.tolist(), "t": truth.t.tolist(),
            "t_z_true": truth.t_z_true.tolist()}


def truth_from_json(obj: dict, dataset: Dataset) -> SynthTruth:
    """Rebuild the truth; canonical shapes come from the camera-frame ``gt3d``."""
    R = np.asarray(obj["R"], float)
    t = np.asarray(obj["t"], float)
    S = (dataset.ground_truth() - t[:, None, :]) @ np.swapaxes(R, 1, 2)
    return SynthTruth([np.asarray(D, float) for D in obj["dictionaries"]],
                      np.asarray(obj["phi_L"], float), S, R, t,
                      np.asarray(obj["t_z_true"], float))


def subset(dataset: Dataset, indices: Sequence[int]) -> Dataset:
    return Dataset(dataset.P, [dataset.records[i] for i in indices], dataset.units,
                   dataset.skeleton, dict(dataset.header_extra))
