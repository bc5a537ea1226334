import numpy as np
import pytest
from hypothesis import given, strategies as st

from litecodec.bitstream import (
    HEADER_BYTES, BitstreamError, bpp, pack, pack_bits, payload_bytes, unpack, unpack_bits,
)
from oracles import pack_bits_reference

GOLDEN = [
    # (grid, f, bits, hex of the full container)
    ([[0, 1], [2, 3]], 16, 2, "434f444c010020002004021b"),
    ([[1]], 16, 1, "434f444c0100100010040180"),
    ([[15, 0], [9, 6]], 16, 4, "434f444c01002000200404f096"),
]


@pytest.mark.parametrize("grid,f,bits,hexdata", GOLDEN)
def test_golden_fixtures(grid, f, bits, hexdata):
    g = np.array(grid)
    data = pack(g, g.shape[0] * f, g.shape[1] * f, f, bits)
    assert data.hex() == hexdata
    out, info = unpack(data)
    assert np.array_equal(out, g) and info.codebook_bits == bits


def test_hand_packed_payloads():
    assert pack_bits([0, 1, 2, 3], 2) == bytes([0x1B])
    assert pack_bits([1], 1) == bytes([0x80])


def test_overflow():
    with pytest.raises(BitstreamError):
        pack_bits([4], 2)


def test_corrupt_magic_and_truncation():
    data = bytearray(pack(np.zeros((2, 2), dtype=int), 32, 32, 16, 4))
    bad = bytes(b"X" + data[1:])
    with pytest.raises(BitstreamError, match="magic"):
        unpack(bad)
    with pytest.raises(BitstreamError, match="truncated"):
        unpack(bytes(data[:-1]))
    with pytest.raises(BitstreamError):
        unpack(bytes(data) + b"\0")


def test_randomized_round_trip_10k():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        h, w = rng.integers(1, 9, size=2)
        bits = int(rng.integers(1, 17))
        f = int(2 ** rng.integers(2, 5))
        grid = rng.integers(0, 1 << bits, size=(h, w))
        data = pack(grid, h * f, w * f, f, bits)
        assert len(data) == HEADER_BYTES + payload_bytes(h, w, bits)
        out, info = unpack(data)
        assert np.array_equal(out, grid)
        assert (info.height, info.width, info.downsample_factor) == (h * f, w * f, f)
        assert pack(out, info.height, info.width, f, bits) == data


@given(st.integers(1, 16), st.lists(st.integers(0, 65535), min_size=0, max_size=40))
def test_pack_bits_matches_reference(bits, values):
    values = [v % (1 << bits) for v in values]
    data = pack_bits(values, bits)
    assert data == pack_bits_reference(values, bits)
    assert len(data) == (len(values) * bits + 7) // 8
    assert unpack_bits(data, len(values), bits).tolist() == values


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 16), st.data())
def test_payload_size_independent_of_content(h, w, bits, data):
    a = data.draw(st.lists(st.integers(0, (1 << bits) - 1), min_size=h * w, max_size=h * w))
    assert len(pack(np.array(a).reshape(h, w), h * 16, w * 16, 16, bits)) == HEADER_BYTES + -(-h * w * bits // 8)


def test_bpp_values():
    assert bpp(16, 4, 256, 256) == 0.015625
    assert bpp(16, 1, 512, 768) == 0.00390625
    assert bpp(4, 8, 64, 64) == 0.5
    assert bpp(16, 4, 32, 32, include_header=True) == 8 * (11 + 2) / 1024
    assert HEADER_BYTES == 11


@given(st.sampled_from([4, 8, 16]), st.integers(1, 16), st.integers(1, 20), st.integers(1, 20))
def test_bpp_independent_of_size(f, bits, h, w):
    assert bpp(f, bits, h * f, w * f) == bits / f ** 2
