"""3D reconstruction metrics.

Conventions:

* ``mpjpe`` centres both shapes, rescales the prediction by the least-squares
  factor, and also tries the depth-flipped prediction (``z -> -z``), keeping
  the lower error.
* ``pa_mpjpe`` applies the optimal similarity transform (Umeyama) first.
* ``stress`` compares pairwise distances after an optimal scale:
  ``sqrt(sum (s d_hat - d)^2 / sum d^2)``.
* ``normalized_3d_error`` is ``sum |pred - gt|_F / sum |gt|_F`` over a set,
  with the same centring, scale and flip handling as ``mpjpe``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

FLIP = np.array([1.0, 1.0, -1.0])


def _center(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=0, keepdims=True)


def _scaled(pred, gt):
    """Least-squares scale of centred ``pred`` onto centred ``gt``; unscaled if pred is zero."""
    pp = float(np.sum(pred * pred))
    if pp <= 0:
        return pred
    return pred * (float(np.sum(pred * gt)) / pp)


def _aligned_candidates(pred, gt):
    p, g = _center(pred), _center(gt)
    return [_scaled(p, g), _scaled(p * FLIP, g)], g


def mpjpe(pred, gt) -> float:
    cands, g = _aligned_candidates(pred, gt)
    return min(float(np.mean(np.linalg.norm(c - g, axis=1))) for c in cands)


def _best_flip(pred, gt):
    cands, g = _aligned_candidates(pred, gt)
    errs = [np.linalg.norm(c - g) for c in cands]
    k = int(np.argmin(errs))
    return cands[k], g, k == 1


def similarity_align(pred, gt):
    """Return ``pred`` mapped by the similarity transform closest to ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mp, gt - mg
    U, s, Vt = np.linalg.svd(p.T @ g)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    var = float(np.sum(p * p))
    c = float(np.sum(s * np.diag(D))) / var if var > 0 else 1.0
    return c * p @ R + mg


def pa_mpjpe(pred, gt) -> float:
    aligned = similarity_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=1)))


def _pairwise(x):
    x = np.asarray(x, dtype=np.float64)
    iu = np.triu_indices(len(x), k=1)
    diff = x[:, None, :] - x[None, :, :]
    return np.linalg.norm(diff, axis=-1)[iu]


def stress(pred, gt) -> float:
    d_hat, d = _pairwise(pred), _pairwise(gt)
    dd = float(np.sum(d * d))
    if d.size == 0 or dd <= 0:
        return 0.0
    hh = float(np.sum(d_hat * d_hat))
    s = float(np.sum(d_hat * d)) / hh if hh > 0 else 0.0
    return float(np.sqrt(np.sum((s * d_hat - d) ** 2) / dd))


def normalized_3d_error(pred_seq, gt_seq) -> float:
    num = den = 0.0
    for pred, gt in zip(pred_seq, gt_seq):
        p, g, _ = _best_flip(pred, gt)
        num += float(np.linalg.norm(p - g))
        den += float(np.linalg.norm(g))
    return num / den if den > 0 else 0.0


def bone_lengths(shape, edges) -> np.ndarray:
    shape = np.asarray(shape)
    return np.array([np.linalg.norm(shape[i] - shape[j]) for i, j in edges])


@dataclass
class EvalReport:
    mpjpe: list = field(default_factory=list)
    pa_mpjpe: list = field(default_factory=list)
    stress: list = field(default_factory=list)
    flipped: list = field(default_factory=list)
    normalized_3d_error: float = 0.0
    mean_bone_error: float | None = None
    skipped: list = field(default_factory=list)     # sample indices without a prediction

    @property
    def n(self) -> int:
        return len(self.mpjpe)

    def summary(self) -> dict:
        out = {
            "samples": self.n,
            "mpjpe": float(np.mean(self.mpjpe)) if self.mpjpe else 0.0,
            "pa_mpjpe": float(np.mean(self.pa_mpjpe)) if self.pa_mpjpe else 0.0,
            "stress": float(np.mean(self.stress)) if self.stress else 0.0,
            "normalized_3d_error": self.normalized_3d_error,
            "flip_count": int(np.sum(self.flipped)),
            "skipped": len(self.skipped),
        }
        if self.mean_bone_error is not None:
            out["mean_bone_error"] = self.mean_bone_error
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["flipped"] = [bool(f) for f in self.flipped]
        d["summary"] = self.summary()
        return d

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "mpjpe", "pa_mpjpe", "stress", "flipped"])
            for i, row in zip(self.indices(), zip(self.mpjpe, self.pa_mpjpe, self.stress, self.flipped)):
                w.writerow([i, *map(repr, row[:3]), int(row[3])])

    def indices(self) -> list:
        skip = set(self.skipped)
        return [i for i in range(self.n + len(skip)) if i not in skip]


def evaluate(preds, gts, skeleton=None) -> EvalReport:
    """Score camera-frame predictions; ``None`` entries are recorded as skipped."""
    rep = EvalReport()
    rep.skipped = [i for i, p in enumerate(preds) if p is None]
    keep = [i for i, p in enumerate(preds) if p is not None]
    preds = [np.asarray(preds[i], dtype=np.float64) for i in keep]
    gts = [np.asarray(gts[i], dtype=np.float64) for i in keep]
    bone_err = []
    for p, g in zip(preds, gts):
        rep.mpjpe.append(mpjpe(p, g))
        rep.pa_mpjpe.append(pa_mpjpe(p, g))
        rep.stress.append(stress(p, g))
        aligned, gc, flipped = _best_flip(p, g)
        rep.flipped.append(flipped)
        if skeleton:
            bone_err.append(float(np.mean(np.abs(bone_lengths(aligned, skeleton)
                                                 - bone_lengths(gc, skeleton)))))
    rep.normalized_3d_error = normalized_3d_error(preds, gts)
    if skeleton:
        rep.mean_bone_error = float(np.mean(bone_err))
    return rep
