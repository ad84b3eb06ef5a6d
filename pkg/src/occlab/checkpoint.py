"""Binary checkpoint format.

Layout::

    b"ORTCKPT1"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON: dtype, meta, tensors[name, shape, offset, count]
    blob                             contiguous little-endian float32 values

Tensors are written in sorted-name order so equal states give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"ORTCKPT1"
DTYPES = {"float32": "<f4"}


class CheckpointError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def encode(tensors: Dict[str, np.ndarray], meta: dict = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    manifest = json.dumps(
        {"dtype": "float32", "meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def decode(raw: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError("bad_magic", "not a checkpoint file (magic mismatch)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise CheckpointError("length_mismatch", "manifest extends past end of file")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("bad_manifest", f"manifest is not valid JSON: {exc}") from None
    dtype = manifest.get("dtype")
    if dtype not in DTYPES:
        raise CheckpointError("unknown_dtype", f"unsupported dtype {dtype!r}")
    blob = raw[16 + mlen :]
    width = np.dtype(DTYPES[dtype]).itemsize
    out = {}
    expected = 0
    for entry in manifest.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(entry["count"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError("shape_mismatch", f"{entry['name']}: shape {shape} does not hold {count} values")
        if int(entry["offset"]) != expected:
            raise CheckpointError("length_mismatch", f"{entry['name']}: offset {entry['offset']} != {expected}")
        expected += count * width
        if expected > len(blob):
            raise CheckpointError("length_mismatch", f"{entry['name']}: blob truncated")
        start = int(entry["offset"])
        out[entry["name"]] = np.frombuffer(blob[start : start + count * width], dtype=DTYPES[dtype]).reshape(shape).copy()
    if expected != len(blob):
        raise CheckpointError("length_mismatch", f"blob holds {len(blob)} bytes, manifest describes {expected}")
    return out, manifest.get("meta", {})


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: dict = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(tensors, meta))
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
