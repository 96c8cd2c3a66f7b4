"""JSON-lines prediction files written by ``infer``.

A header line is followed by one object per input sample::

    {"format": "deepnrsfm-predictions", "version": "1.0", "camera": "persp", "P": 20}
    {"index": 0, "S": [...], "R": [...], "t": [...], "phi_L": [...],
     "points2d": [...], "loss": 0.01}
    {"index": 1, "error": "code vanished"}

``points2d`` is the reprojection of the camera-frame shape ``S R + t``.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SchemaError, VersionError
from .geometry import Camera, PoseEstimate, as_camera, project

FORMAT = "deepnrsfm-predictions"
VERSION = "1.0"


def reprojection(pose: PoseEstimate, camera) -> np.ndarray:
    shape = pose.camera_shape()
    if as_camera(camera) is Camera.ORTHOGONAL:
        return shape[:, :2]
    return project(shape, Camera.PERSPECTIVE)


def save(path, camera, P: int, outputs, losses=None) -> None:
    camera = as_camera(camera)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT, "version": VERSION, "camera": camera.value,
                             "P": P}) + "\n")
        for i, pose in enumerate(outputs):
            if pose is None:
                row = {"index": i, "error": "code vanished"}
            else:
                row = {"index": i, **pose.to_dict(),
                       "points2d": reprojection(pose, camera).tolist()}
                if losses is not None:
                    row["loss"] = float(losses[i])
            fh.write(json.dumps(row) + "\n")


def load(path) -> tuple[dict, list, list]:
    """Return ``(header, poses, reprojections)``; failed samples appear as ``None``."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise SchemaError("empty predictions file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bad header: {exc}", 1) from exc
    if header.get("format") != FORMAT:
        raise SchemaError(f"not a {FORMAT} file", 1)
    if int(str(header.get("version", "0")).split(".")[0]) > int(VERSION.split(".")[0]):
        raise VersionError(f"predictions version {header['version']} is newer than {VERSION}", 1)
    poses, reproj = [], []
    for n, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
            if "error" in row:
                poses.append(None)
                reproj.append(None)
                continue
            poses.append(PoseEstimate.from_dict(row))
            reproj.append(np.asarray(row["points2d"], dtype=np.float64))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad prediction record: {exc}", n) from exc
    return header, poses, reproj
