"""Parameter checkpoint container: magic string, JSON header, raw little-endian data.

Layout: b"DYNM1" | uint64-LE header length | UTF-8 JSON header | value blob.
The header maps each parameter name to shape, dtype and byte offset into the
blob, and carries an optional "meta" dict (model config is stored there).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"DYNM1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(IOError):
    pass


def save(path, params: dict, meta: dict | None = None) -> None:
    """Write a name -> Tensor mapping (insertion order preserved)."""
    entries = {}
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype.name} for {name!r}")
        raw = arr.astype(_DTYPES[arr.dtype.name]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"params": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load(path) -> tuple[dict, dict]:
    """Read back (name -> float ndarray, meta)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in {path}: {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt header in {path}: {e}") from e
        blob = f.read()
    params = {}
    for name, ent in header["params"].items():
        dt = np.dtype(_DTYPES[ent["dtype"]])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        end = start + count * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint: {name!r} runs past end of file")
        arr = np.frombuffer(blob[start:end], dtype=dt).reshape(ent["shape"])
        params[name] = arr.astype(ent["dtype"])
    return params, header.get("meta", {})
