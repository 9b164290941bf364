"""U3DC tensor checkpoint format.

Layout: magic ``U3DC``, u32 version, u64 header length, a UTF-8 JSON header
mapping tensor name -> {"dtype": "f32", "shape": [...], "offset": bytes}, then
one contiguous little-endian f32 blob. An optional ``__metadata__`` entry in
the header carries free-form JSON (e.g. the encoder config).
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any, Mapping

import numpy as np

MAGIC = b"U3DC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.array(t, dtype="<f4", order="C")  # keeps 0-d shapes


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, Any], metadata: Mapping | None = None) -> None:
    header: dict[str, Any] = {}
    if metadata is not None:
        header["__metadata__"] = metadata
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = _to_numpy(t)
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict | None]:
    """Return (name -> float32 array, metadata)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + head_len
    if start > len(data):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    metadata = header.pop("__metadata__", None)
    blob = memoryview(data)[start:]
    tensors = {}
    for name, info in header.items():
        if info.get("dtype") != "f32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {info.get('dtype')}")
        shape = tuple(info["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = info["offset"]
        hi = lo + 4 * count
        if hi > len(blob):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(shape).copy()
    return tensors, metadata
