"""Read and write ``DLR1`` weight archives.

Layout::

    b"DLR1" | uint32 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest is a JSON list of ``{"name", "rows", "cols", "offset"}``
objects; ``offset`` is the byte offset of the tensor within the payload.
Tensors are little-endian float64 in row-major order.
"""

import json
import struct

import numpy as np

from .errors import InputError

MAGIC = b"DLR1"
_DTYPE = np.dtype("<f8")


def dumps(tensors):
    """Serialize an ordered ``name -> 2-D array`` mapping to bytes."""
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        if a.ndim != 2:
            raise InputError(f"tensor {name!r} must be 2-D, got shape {a.shape}")
        manifest.append({"name": name, "rows": a.shape[0], "cols": a.shape[1], "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def loads(data):
    if len(data) < 8 or data[:4] != MAGIC:
        raise InputError("not a DLR1 archive (bad magic)")
    (n,) = struct.unpack("<I", data[4:8])
    if 8 + n > len(data):
        raise InputError("manifest length runs past end of file")
    try:
        manifest = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"unreadable manifest: {exc}") from None
    payload = memoryview(data)[8 + n:]
    tensors = {}
    spans = []
    for entry in manifest:
        name, rows, cols, off = entry["name"], int(entry["rows"]), int(entry["cols"]), int(entry["offset"])
        if name in tensors:
            raise InputError(f"duplicate tensor name {name!r}")
        size = rows * cols * _DTYPE.itemsize
        if off < 0 or off + size > len(payload):
            raise InputError(f"tensor {name!r} lies outside the payload")
        spans.append((off, off + size, name))
        tensors[name] = np.frombuffer(payload[off:off + size], dtype=_DTYPE).reshape(rows, cols).astype(np.float64)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise InputError(f"tensors {an!r} and {bn!r} overlap")
    if sum(e - s for s, e, _ in spans) != len(payload):
        raise InputError("payload length does not match the manifest")
    return tensors


def write_archive(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def read_archive(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def weights_to_tensors(weights):
    """Flatten :class:`~lowrank_tp.pipelines.ToyWeights` into archive names ``layers.<i>.<matrix>``."""
    out = {"embedding": weights.embedding}
    for i, layer in enumerate(weights.layers):
        for name, w in layer.items():
            out[f"layers.{i}.{name}"] = w
    out["lm_head"] = weights.lm_head
    return out
