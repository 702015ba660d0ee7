"""Self-describing named-tensor files.

Layout::

    b"EDGEKIT\\x01" | uint64 LE header length | UTF-8 JSON header | raw tensors

The header holds caller metadata under ``"meta"`` and one entry per tensor
(name, dtype, shape, offset, nbytes). Tensor bytes are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EDGEKIT\x01"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an edgekit tensor file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an edgekit tensor file")
    (n,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + n].decode("utf-8"))
    body = start + n
    tensors = {}
    for e in header["tensors"]:
        lo = body + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=lo)
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(e["shape"])
    return tensors, header["meta"]


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> str:
    """Order-independent content hash used to detect stale precomputed artifacts."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype.str).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]
