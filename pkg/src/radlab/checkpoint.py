"""Checkpoint container: a readable JSON header followed by raw float64 data.

Layout::

    RADLAB-CHECKPOINT\\n
    {"version": 1, "tensors": [...], ...caller fields...}\\n
    <little-endian float64 payload>

Each tensor entry records ``name``, ``shape`` and ``offset`` (bytes from the
start of the payload). Round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .tensor import Tensor

MAGIC = b"RADLAB-CHECKPOINT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, Tensor | np.ndarray], header: dict | None = None) -> bytes:
    directory = []
    payload = io.BytesIO()
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
        payload.write(raw)
    head = dict(header or {})
    head["version"] = VERSION
    head["tensors"] = directory
    text = json.dumps(head, sort_keys=True)
    return MAGIC + text.encode("utf-8") + b"\n" + payload.getvalue()


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a radlab checkpoint (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("checkpoint header is not terminated")
    try:
        header = json.loads(blob[len(MAGIC) : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    data = memoryview(blob)[end + 1 :]
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(data):
            raise CheckpointError(f"truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(data[start : start + 8 * count], dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return header, arrays


def save(path: str | Path, tensors: dict, header: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(tensors, header))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
