import json
import struct

import numpy as np
import pytest

from lowrank_tp.archive import MAGIC, dumps, loads, read_archive, weights_to_tensors, write_archive
from lowrank_tp.errors import InputError
from lowrank_tp.pipelines import ModelConfig, random_weights


def test_round_trip_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"a": r.standard_normal((3, 4)), "b": r.standard_normal((1, 7)) * 1e300, "c": np.zeros((2, 2))}
    path = tmp_path / "w.dlr"
    write_archive(path, tensors)
    back = read_archive(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()


def test_layout():
    data = dumps({"x": np.array([[1.0, 2.0]])})
    assert data[:4] == MAGIC
    (n,) = struct.unpack("<I", data[4:8])
    assert json.loads(data[8:8 + n]) == [{"name": "x", "rows": 1, "cols": 2, "offset": 0}]
    assert data[8 + n:] == struct.pack("<2d", 1.0, 2.0)


def _raw(manifest, payload):
    head = json.dumps(manifest).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


@pytest.mark.parametrize("data", [
    b"XXXX\x00\x00\x00\x00",
    _raw([{"name": "a", "rows": 1, "cols": 1, "offset": 0}, {"name": "a", "rows": 1, "cols": 1, "offset": 8}],
         b"\x00" * 16),
    _raw([{"name": "a", "rows": 1, "cols": 2, "offset": 0}, {"name": "b", "rows": 1, "cols": 1, "offset": 8}],
         b"\x00" * 16),
    _raw([{"name": "a", "rows": 1, "cols": 1, "offset": 0}], b"\x00" * 16),
    _raw([{"name": "a", "rows": 2, "cols": 1, "offset": 0}], b"\x00" * 8),
])
def test_invalid_archives(data):
    with pytest.raises(InputError):
        loads(data)


def test_weights_to_tensors_names():
    cfg = ModelConfig(2, 2, 4, 8, num_layers=2)
    names = list(weights_to_tensors(random_weights(cfg)))
    assert names[0] == "embedding" and names[-1] == "lm_head"
    assert "layers.1.gate" in names
