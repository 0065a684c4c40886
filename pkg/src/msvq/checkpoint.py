"""``.ntc`` named-tensor container.

Layout (little-endian)::

    "NTC1"                      4 bytes magic
    entry count                 u32
    per entry, sorted by name:
        name length             u16
        name                    UTF-8
        rank                    u8
        dims                    u32 x rank
        dtype                   u8   0 = float32, 1 = uint8
        data                    raw little-endian, C order
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"NTC1"
EXTENSION = ".ntc"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def to_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.kind == "f":
            code = 0
        elif arr.dtype == np.uint8:
            code = 1
        else:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def from_bytes(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic (expected NTC1)")
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("entry name is not UTF-8") from None
        if prev is not None and name <= prev:
            raise CheckpointError("entries not sorted by name")
        prev = name
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        (code,) = r.unpack("<B")
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dtype = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def write_ntc(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(tensors))
    os.replace(tmp, path)


def read_ntc(path) -> dict[str, np.ndarray]:
    return from_bytes(Path(path).read_bytes())


def pack_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def unpack_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")
