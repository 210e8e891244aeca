import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdnet.tilestore import (
    GB,
    MB,
    TB,
    EmbeddingTile,
    TileFormatError,
    pack_tile,
    read_tile,
    tile_path,
    unpack_tile,
    volume_report,
    write_tile,
)


def header_len(tile_id: str, d: int = 4) -> int:
    return 4 + 6 + len(tile_id.encode()) + 13 + 2 * d


def test_zero_tile_payload_size():
    tile = EmbeddingTile("T01", 2024, np.zeros((2, 4, 4), dtype=np.uint16))
    buf = pack_tile(tile, compress=False)
    assert len(buf) - header_len("T01") == 64
    assert buf[:4] == b"ESD1"


def test_header_fields_by_hand():
    tile = EmbeddingTile("ab", 2021, np.arange(6, dtype=np.uint16).reshape(1, 2, 3), levels=(4, 4))
    buf = pack_tile(tile, compress=False)
    expected = (b"ESD1" + struct.pack("<HHH", 1, 0, 2) + b"ab" + struct.pack("<HHIIB", 2021, 1, 2, 3, 2)
                + struct.pack("<2H", 4, 4) + struct.pack("<6H", *range(6)))
    assert buf == expected


def test_production_raw_size_arithmetic():
    assert 12 * 3600 * 3600 * 2 == 311_040_000


@settings(max_examples=120, deadline=None)
@given(T=st.integers(1, 13), H=st.integers(1, 17), W=st.integers(1, 17), compress=st.booleans(),
       levels=st.sampled_from([(16, 16, 16, 16), (4, 4, 4, 4), (8, 8, 16, 16)]), seed=st.integers(0, 2**31),
       tid=st.text(min_size=0, max_size=12))
def test_roundtrip_bit_exact(T, H, W, compress, levels, seed, tid):
    size = int(np.prod(levels))
    codes = np.random.default_rng(seed).integers(0, size, size=(T, H, W)).astype(np.uint16)
    tile = EmbeddingTile(tid, 2024, codes, levels)
    buf = pack_tile(tile, compress)
    back = unpack_tile(buf)
    assert back == tile
    assert back.codes.dtype == np.uint16
    assert pack_tile(back, compress) == buf


def test_deflate_is_raw_rfc1951():
    codes = np.random.default_rng(0).integers(0, 65536, size=(3, 5, 5)).astype(np.uint16)
    tile = EmbeddingTile("x", 2020, codes)
    buf = pack_tile(tile, compress=True)
    payload = buf[header_len("x"):]
    assert zlib.decompress(payload, -15) == codes.astype("<u2").tobytes()


def test_constant_tile_compresses_below_one_percent():
    codes = np.full((12, 256, 256), 40000, dtype=np.uint16)
    tile = EmbeddingTile("const", 2024, codes)
    raw = len(pack_tile(tile, compress=False)) - header_len("const")
    packed = len(pack_tile(tile, compress=True)) - header_len("const")
    assert packed < 0.01 * raw


def test_write_rejects_out_of_range_codes():
    with pytest.raises(ValueError, match="codebook"):
        EmbeddingTile("t", 2024, np.full((1, 2, 2), 256, dtype=np.uint16), levels=(4, 4, 4, 4))


@pytest.fixture
def packed():
    codes = np.random.default_rng(3).integers(0, 256, size=(2, 3, 4)).astype(np.uint16)
    tile = EmbeddingTile("t", 2024, codes, (4, 4, 4, 4))
    return tile, pack_tile(tile, compress=False), pack_tile(tile, compress=True)


def test_bad_magic(packed):
    _, raw, _ = packed
    with pytest.raises(TileFormatError, match="bad magic"):
        unpack_tile(b"ESD2" + raw[4:])


@pytest.mark.parametrize("which", [1, 2])
def test_truncated_payload(packed, which):
    buf = packed[which]
    with pytest.raises(TileFormatError, match="truncated payload"):
        unpack_tile(buf[:-1])


def test_truncated_header(packed):
    with pytest.raises(TileFormatError, match="truncated header"):
        unpack_tile(packed[1][:12])


def test_reader_rejects_code_beyond_codebook(packed):
    tile, raw, _ = packed
    bad = bytearray(raw)
    bad[-2:] = struct.pack("<H", 300)
    with pytest.raises(TileFormatError, match="codebook size 256"):
        unpack_tile(bytes(bad))


def test_trailing_bytes_rejected(packed):
    with pytest.raises(TileFormatError, match="beyond"):
        unpack_tile(packed[1] + b"\0\0")


def test_unknown_flags_rejected(packed):
    bad = bytearray(packed[1])
    bad[6:8] = struct.pack("<H", 0x8)
    with pytest.raises(TileFormatError, match="flag"):
        unpack_tile(bytes(bad))


def test_directory_convention(tmp_path):
    tile = EmbeddingTile("50RKU", 2024, np.ones((12, 2, 2), dtype=np.uint16))
    path = write_tile(tmp_path, tile)
    assert path == tmp_path / "2024" / "50RKU.esd"
    assert tile_path(tmp_path, 2024, "50RKU") == path
    assert read_tile(path) == tile


def test_volume_table_reproduction():
    r = volume_report(136.3 * MB, 1224, 18466, 45.6 * GB)
    assert 325 <= r.ratio <= 360
    assert r.ratio == pytest.approx(342.6, abs=0.05)
    assert abs(r.global_stored_bytes / TB - 2.4) <= 0.24
    assert r.region_stored_bytes / GB == pytest.approx(162.9, abs=0.05)
    assert r.region_baseline_bytes / TB == pytest.approx(54.5, abs=0.05)
    assert r.global_baseline_bytes / (1 << 50) == pytest.approx(0.8, abs=0.05)


def test_volume_edge_cases():
    assert volume_report(100, 1, 1, 100).ratio == 1.0
    with pytest.raises(ValueError, match="baseline"):
        volume_report(100, 1, 1, 0)
