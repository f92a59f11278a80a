"""DSHG1 named-tensor archive.

Layout (all integers little-endian)::

    b"DSHG1"
    u32 metadata length, then that many bytes of UTF-8 JSON
    u32 tensor count
    per tensor:
        u32 name length, UTF-8 name
        u8  dtype code (0 = float32, 1 = float64)
        u32 rank, then rank x u64 dims
        raw little-endian values, row-major

A file must end exactly after the last tensor.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"DSHG1"
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> np.ndarray


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(
                f"truncated at offset {self.pos} reading {what}: expected length >= {end} bytes, actual {len(self.data)}"
            )
        out = self.data[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {MAGIC!r}, got {magic!r}")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_off = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata at offset {meta_off} is not valid UTF-8 JSON: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"tensor {i} name length")
        name_off = r.pos
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name at offset {name_off} is not UTF-8") from None
        code_off = r.pos
        code, rank = r.unpack("<BI", f"{name} dtype/rank")
        if code not in CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code} at offset {code_off}")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        raw = r.take(nbytes, f"{name} values")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(data):
        raise FormatError(f"size mismatch: expected length {r.pos} bytes, actual {len(data)} (trailing data)")
    return Checkpoint(metadata, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
