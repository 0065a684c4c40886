"""``.msvq`` container for hierarchical latent indices.

Layout (all integers little-endian)::

    "MSVQ1"            5 bytes magic
    version            u8   (= 1)
    T, H, W            u16 x 3   clip dims
    levels             u8   (1 or 2)
    per level          u16 x 3 grid dims, u32 alphabet K   (top first)
    payload            zlib stream (RFC 1950 around RFC 1951 DEFLATE) of every
                       index as u16, top level first, row-major (T', H', W')

The zlib stream is produced with the header bytes as its preset dictionary
(FDICT), so the stream's DICTID binds it to the exact header: any header
mutation fails decompression, and the trailing Adler-32 covers the payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BitstreamError

MAGIC = b"MSVQ1"
VERSION = 1
MAX_ALPHABET = 1 << 16
COMPRESSION_LEVEL = 9
EXTENSION = ".msvq"

_FIXED = struct.Struct("<5sBHHHB")
_LEVEL = struct.Struct("<HHHI")


@dataclass(frozen=True)
class LevelInfo:
    name: str
    shape: tuple[int, int, int]
    alphabet: int

    @property
    def count(self) -> int:
        t, h, w = self.shape
        return t * h * w


@dataclass(frozen=True)
class Header:
    dims: tuple[int, int, int]
    levels: tuple[LevelInfo, ...]
    header_bytes: int
    payload_bytes: int

    @property
    def total_indices(self) -> int:
        return sum(lv.count for lv in self.levels)

    def level(self, name: str) -> Optional[LevelInfo]:
        for lv in self.levels:
            if lv.name == name:
                return lv
        return None


@dataclass(frozen=True)
class Container:
    dims: tuple[int, int, int]
    indices_top: Optional[np.ndarray]
    indices_bottom: np.ndarray
    alphabet_top: Optional[int]
    alphabet_bottom: int


def _check_grid(name: str, grid, alphabet: int) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise BitstreamError(f"{name} index grid must be 3-D (T', H', W'), got shape {grid.shape}")
    if not np.issubdtype(grid.dtype, np.integer):
        raise BitstreamError(f"{name} indices must be integers")
    if not 1 <= alphabet <= MAX_ALPHABET:
        raise BitstreamError(f"{name} alphabet K={alphabet} outside [1, {MAX_ALPHABET}]")
    if any(d > 0xFFFF for d in grid.shape):
        raise BitstreamError(f"{name} grid dims {grid.shape} exceed 16 bits")
    if grid.size and (grid.min() < 0 or grid.max() >= alphabet):
        raise BitstreamError(f"{name} index out of range [0, {alphabet})")
    return grid


def _header_bytes(dims, levels: list[tuple[tuple[int, int, int], int]]) -> bytes:
    if len(dims) != 3 or any(not 0 <= d <= 0xFFFF for d in dims):
        raise BitstreamError(f"clip dims {tuple(dims)} must be three 16-bit values")
    out = _FIXED.pack(MAGIC, VERSION, *dims, len(levels))
    for shape, k in levels:
        out += _LEVEL.pack(*shape, k)
    return out


def serialize(indices_top, indices_bottom, dims, alphabets) -> bytes:
    """Pack index grids into a container.

    ``indices_top`` is None for single-level models; ``alphabets`` is
    ``(K_top, K_bottom)`` (``K_top`` ignored when there is no top level).
    """
    k_top, k_bottom = alphabets
    grids = []
    if indices_top is not None:
        grids.append((_check_grid("top", indices_top, int(k_top)), int(k_top)))
    grids.append((_check_grid("bottom", indices_bottom, int(k_bottom)), int(k_bottom)))
    header = _header_bytes(tuple(int(d) for d in dims), [(g.shape, k) for g, k in grids])
    raw = b"".join(np.ascontiguousarray(g, dtype="<u2").tobytes() for g, _ in grids)
    comp = zlib.compressobj(COMPRESSION_LEVEL, zlib.DEFLATED, 15, zdict=header)
    return header + comp.compress(raw) + comp.flush()


def parse_header(data: bytes) -> Header:
    data = bytes(data)
    if len(data) < _FIXED.size:
        if not MAGIC.startswith(data[:5]):
            raise BitstreamError("bad magic")
        raise BitstreamError("truncated header")
    magic, version, t, h, w, nlev = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError("bad magic")
    if version != VERSION:
        raise BitstreamError(f"unsupported container version {version}")
    if nlev not in (1, 2):
        raise BitstreamError(f"invalid level count {nlev}")
    end = _FIXED.size + nlev * _LEVEL.size
    if len(data) < end:
        raise BitstreamError("truncated header")
    names = ("top", "bottom") if nlev == 2 else ("bottom",)
    levels = []
    for i, name in enumerate(names):
        lt, lh, lw, k = _LEVEL.unpack_from(data, _FIXED.size + i * _LEVEL.size)
        if not 1 <= k <= MAX_ALPHABET:
            raise BitstreamError(f"{name} alphabet K={k} outside [1, {MAX_ALPHABET}]")
        levels.append(LevelInfo(name, (lt, lh, lw), k))
    return Header((t, h, w), tuple(levels), end, len(data) - end)


def deserialize(data: bytes) -> tuple[Header, Container]:
    data = bytes(data)
    header = parse_header(data)
    expected = 2 * header.total_indices
    dec = zlib.decompressobj(zdict=data[:header.header_bytes])
    try:
        raw = dec.decompress(data[header.header_bytes:], expected + 1)
    except zlib.error as exc:
        raise BitstreamError(f"DEFLATE decode failure: {exc}") from None
    if len(raw) > expected:
        raise BitstreamError(f"payload longer than the {expected} bytes the header declares")
    if not dec.eof:
        raise BitstreamError("truncated payload")
    if dec.unused_data:
        raise BitstreamError("trailing bytes after payload")
    if len(raw) != expected:
        raise BitstreamError(f"payload length {len(raw)} != declared {expected}")

    values = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    grids = {}
    offset = 0
    for lv in header.levels:
        g = values[offset:offset + lv.count].reshape(lv.shape)
        offset += lv.count
        if g.size and g.max() >= lv.alphabet:
            raise BitstreamError(f"{lv.name} index out of range [0, {lv.alphabet})")
        grids[lv.name] = g
    top = header.level("top")
    bottom = header.level("bottom")
    return header, Container(
        dims=header.dims,
        indices_top=grids.get("top"),
        indices_bottom=grids["bottom"],
        alphabet_top=top.alphabet if top else None,
        alphabet_bottom=bottom.alphabet,
    )
