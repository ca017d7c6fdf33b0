"""Tensor archive: named float32 arrays in one file.

Layout::

    b"NDTA"            4-byte magic
    uint64 LE          byte length of the manifest
    manifest           UTF-8 JSON: {"tensors": [{"name", "shape", "dtype", "offset"}], "meta": {...}}
    payload            raw little-endian float32 buffers; offsets are relative to payload start
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NDTA"


def save(path, tensors, meta=None):
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32", "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load(path, with_meta=False):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor archive")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    base = 12 + mlen
    out = {}
    for ent in manifest["tensors"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        start = base + ent["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        out[ent["name"]] = arr.astype(np.float32).reshape(ent["shape"])
    return (out, manifest.get("meta", {})) if with_meta else out
