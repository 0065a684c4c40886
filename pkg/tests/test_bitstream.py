import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msvq.bitstream import MAGIC, deserialize, parse_header, serialize
from msvq.errors import BitstreamError


def grids(rng, top_shape, bottom_shape, kt, kb):
    top = rng.integers(0, kt, top_shape) if top_shape else None
    return top, rng.integers(0, kb, bottom_shape)


def test_header_bytes_hand_assembled():
    data = serialize(None, np.zeros((2, 2, 2), int), (4, 8, 8), (1, 4))
    expected = (b"MSVQ1" + bytes([0x01]) + bytes([0x04, 0x00, 0x08, 0x00, 0x08, 0x00])
                + bytes([0x01]) + bytes([0x02, 0x00, 0x02, 0x00, 0x02, 0x00, 0x04, 0x00, 0x00, 0x00]))
    assert data[:len(expected)] == expected
    # the rest is one zlib stream whose preset dictionary is exactly the header
    dec = zlib.decompressobj(zdict=expected)
    assert dec.decompress(data[len(expected):]) == b"\x00" * 16
    assert dec.eof


def test_round_trip_two_levels():
    rng = np.random.default_rng(0)
    top, bottom = grids(rng, (2, 3, 4), (4, 6, 8), 1024, 512)
    header, c = deserialize(serialize(top, bottom, (16, 48, 64), (1024, 512)))
    assert header.dims == (16, 48, 64)
    assert [lv.name for lv in header.levels] == ["top", "bottom"]
    np.testing.assert_array_equal(c.indices_top, top)
    np.testing.assert_array_equal(c.indices_bottom, bottom)
    assert (c.alphabet_top, c.alphabet_bottom) == (1024, 512)


def test_serialization_is_deterministic():
    rng = np.random.default_rng(1)
    top, bottom = grids(rng, (2, 2, 2), (4, 4, 4), 16, 16)
    assert serialize(top, bottom, (8, 16, 16), (16, 16)) == serialize(top, bottom, (8, 16, 16), (16, 16))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.booleans(), st.integers(1, 65536), st.integers(1, 65536))
def test_round_trip_property(seed, two_levels, kt, kb):
    rng = np.random.default_rng(seed)
    bs = tuple(int(x) for x in rng.integers(0, 6, 3))
    ts = tuple(int(x) for x in rng.integers(0, 4, 3)) if two_levels else None
    top, bottom = grids(rng, ts, bs, kt, kb)
    dims = tuple(int(x) for x in rng.integers(0, 2000, 3))
    _, c = deserialize(serialize(top, bottom, dims, (kt, kb)))
    assert c.dims == dims
    np.testing.assert_array_equal(c.indices_bottom, bottom)
    if two_levels:
        np.testing.assert_array_equal(c.indices_top, top)
    else:
        assert c.indices_top is None


def test_index_overflow_and_alphabet_limit():
    with pytest.raises(BitstreamError):
        serialize(None, np.full((1, 1, 1), 4), (4, 4, 4), (1, 4))
    with pytest.raises(BitstreamError):
        serialize(None, np.zeros((1, 1, 1), int), (4, 4, 4), (1, 65537))
    with pytest.raises(BitstreamError):
        serialize(None, np.full((1, 1, 1), -1), (4, 4, 4), (1, 4))


def test_bad_magic_version_truncation():
    data = serialize(None, np.arange(8).reshape(2, 2, 2) % 4, (4, 8, 8), (1, 4))
    bad = bytearray(data)
    bad[0] ^= 0xFF
    with pytest.raises(BitstreamError, match="magic"):
        deserialize(bytes(bad))
    bad = bytearray(data)
    bad[5] = 2
    with pytest.raises(BitstreamError, match="version"):
        deserialize(bytes(bad))
    with pytest.raises(BitstreamError, match="truncated"):
        deserialize(data[:-3])
    with pytest.raises(BitstreamError, match="truncated"):
        deserialize(data[:10])
    with pytest.raises(BitstreamError):
        deserialize(data + b"\x00")


def test_every_single_byte_header_mutation_rejected():
    rng = np.random.default_rng(2)
    top, bottom = grids(rng, (2, 2, 2), (4, 4, 4), 16, 16)
    data = serialize(top, bottom, (8, 16, 16), (16, 16))
    hlen = parse_header(data).header_bytes
    for pos in range(hlen):
        for delta in (1, 0x80, 0xFF):
            bad = bytearray(data)
            bad[pos] = (bad[pos] + delta) % 256
            with pytest.raises(BitstreamError):
                deserialize(bytes(bad))


def test_payload_bit_flips_detected():
    rng = np.random.default_rng(3)
    top, bottom = grids(rng, (4, 4, 4), (8, 8, 8), 1024, 1024)
    data = serialize(top, bottom, (16, 32, 32), (1024, 1024))
    hlen = parse_header(data).header_bytes
    trials, caught = 2000, 0
    for _ in range(trials):
        bad = bytearray(data)
        pos = int(rng.integers(hlen, len(data)))
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        try:
            deserialize(bytes(bad))
        except BitstreamError:
            caught += 1
    assert caught / trials >= 0.99


def test_magic_constant():
    assert MAGIC == b"MSVQ1" and len(MAGIC) == 5
