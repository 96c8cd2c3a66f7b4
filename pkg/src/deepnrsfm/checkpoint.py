"""Binary checkpoint format.

A checkpoint is one line of JSON (the manifest) terminated by ``\\n``,
followed by the raw little-endian float64 data of every array listed in
``manifest["arrays"]``, concatenated in that order, each row-major::

    {"format": "deepnrsfm-checkpoint", "version": "1.0", "camera": "ortho",
     "P": 20, "dict_sizes": [16, 8, 4], "model": {...},
     "arrays": [{"name": "D1", "shape": [60, 16]}, ...], "meta": {...}}

Round trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SchemaError, VersionError
from .model import ModelConfig, ModelParams

FORMAT = "deepnrsfm-checkpoint"
VERSION = "1.0"


def write_arrays(path, manifest: dict, arrays: dict) -> None:
    manifest = dict(manifest)
    manifest["format"] = FORMAT
    manifest["version"] = VERSION
    manifest["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(head + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(b"\n")
    if cut < 0:
        raise SchemaError("checkpoint has no manifest line")
    try:
        manifest = json.loads(blob[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise SchemaError(f"not a {FORMAT} file")
    major = int(str(manifest.get("version", "0")).split(".")[0])
    if major > int(VERSION.split(".")[0]):
        raise VersionError(f"checkpoint version {manifest['version']} is newer than {VERSION}")
    arrays = {}
    offset = cut + 1
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise SchemaError(f"checkpoint truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise SchemaError("trailing bytes after the last array")
    return manifest, arrays


def model_manifest(params: ModelParams) -> dict:
    c = params.config
    return {"camera": c.camera.value, "P": c.P, "dict_sizes": list(c.dict_sizes),
            "model": c.to_dict()}


def save_params(path, params: ModelParams, meta: dict | None = None, extra_arrays=None) -> None:
    arrays = dict(params.arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    manifest = model_manifest(params)
    manifest["meta"] = meta or {}
    write_arrays(path, manifest, arrays)


def load_params(path) -> tuple[ModelParams, dict, dict]:
    """Return ``(params, manifest, arrays)``; ``arrays`` also holds any extra state."""
    manifest, arrays = read_arrays(path)
    config = ModelConfig.from_dict(manifest["model"])
    return ModelParams.from_arrays(config, arrays), manifest, arrays
