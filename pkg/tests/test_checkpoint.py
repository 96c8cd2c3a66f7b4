import json

import numpy as np
import pytest

from deepnrsfm.checkpoint import load_params, read_arrays, save_params, write_arrays
from deepnrsfm.errors import SchemaError, VersionError
from deepnrsfm.model import ModelConfig, ModelParams


def _params():
    return ModelParams.initialize(ModelConfig(7, (5, 3, 2), "persp"), seed=4, lam_init=0.02)


def test_round_trip_is_bit_exact(tmp_path):
    params = _params()
    path = tmp_path / "m.ckpt"
    save_params(path, params, meta={"note": "x"}, extra_arrays={"extra": np.arange(3.0)})
    back, manifest, arrays = load_params(path)
    assert back.config == params.config
    for a, b in zip(params.tensors(), back.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    assert manifest["meta"] == {"note": "x"}
    assert np.array_equal(arrays["extra"], np.arange(3.0))


def test_special_values_survive(tmp_path):
    arr = np.array([0.0, -0.0, 5e-324, np.inf, -np.inf, np.nan, 1.7976931348623157e308])
    write_arrays(tmp_path / "a.bin", {}, {"a": arr})
    _, out = read_arrays(tmp_path / "a.bin")
    assert out["a"].tobytes() == arr.tobytes()


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, _params())
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(SchemaError, match="truncated"):
        load_params(path)


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, _params())
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(SchemaError, match="trailing"):
        load_params(path)


def test_newer_version_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, _params())
    blob = path.read_bytes()
    cut = blob.index(b"\n")
    head = json.loads(blob[:cut])
    head["version"] = "2.0"
    path.write_bytes(json.dumps(head).encode() + blob[cut:])
    with pytest.raises(VersionError):
        load_params(path)


def test_foreign_file_is_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(SchemaError):
        read_arrays(path)
    path.write_bytes(b"no newline")
    with pytest.raises(SchemaError):
        read_arrays(path)
