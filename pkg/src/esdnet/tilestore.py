"""The ``ESD1`` tile format and data-volume accounting.

Layout (little-endian)::

    magic      4s   b"ESD1"
    version    u16
    flags      u16  bit0 = payload is raw DEFLATE (RFC 1951)
    id_len     u16, then id_len bytes of UTF-8 tile id
    year       u16
    T          u16
    H, W       u32, u32
    d          u8, then d x u16 level counts
    payload    T*H*W uint16 codes, row-major [T, H, W]
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fsq import FsqSpec

MAGIC = b"ESD1"
VERSION = 1
FLAG_DEFLATE = 0x1
# byte multiples match the volume table: 1 GB = 1024 MB
MB = 1 << 20
GB = 1 << 30
TB = 1 << 40


class TileFormatError(ValueError):
    pass


@dataclass
class EmbeddingTile:
    tile_id: str
    year: int
    codes: np.ndarray  # [T, H, W] uint16
    levels: tuple[int, ...] = (16, 16, 16, 16)

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        self.codes = np.asarray(self.codes)
        self.validate()

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.codes.shape

    @property
    def codebook_size(self) -> int:
        return FsqSpec(self.levels).codebook_size

    def validate(self) -> None:
        if self.codes.ndim != 3:
            raise ValueError(f"tile codes must be [T, H, W], got shape {self.codes.shape}")
        if not np.issubdtype(self.codes.dtype, np.integer):
            raise ValueError(f"tile codes must be integers, got {self.codes.dtype}")
        if not 0 <= self.year < 1 << 16:
            raise ValueError(f"year {self.year} does not fit u16")
        T, H, W = self.codes.shape
        if T >= 1 << 16 or H >= 1 << 32 or W >= 1 << 32:
            raise ValueError(f"tile extents {self.codes.shape} exceed header field widths")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ValueError(f"code {int(self.codes.max())} outside codebook of size {self.codebook_size}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingTile):
            return NotImplemented
        return (self.tile_id == other.tile_id and self.year == other.year and self.levels == other.levels
                and self.codes.shape == other.codes.shape and np.array_equal(self.codes, other.codes))


def _header(tile: EmbeddingTile, flags: int) -> bytes:
    tid = tile.tile_id.encode("utf-8")
    if len(tid) >= 1 << 16:
        raise ValueError("tile id longer than 65535 bytes")
    T, H, W = tile.codes.shape
    d = len(tile.levels)
    return b"".join([
        MAGIC,
        struct.pack("<HHH", VERSION, flags, len(tid)),
        tid,
        struct.pack("<HHIIB", tile.year, T, H, W, d),
        struct.pack(f"<{d}H", *tile.levels),
    ])


def pack_tile(tile: EmbeddingTile, compress: bool = True, level: int = 6) -> bytes:
    tile.validate()
    raw = np.ascontiguousarray(tile.codes, dtype="<u2").tobytes()
    if compress:
        c = zlib.compressobj(level, zlib.DEFLATED, -15)
        raw = c.compress(raw) + c.flush()
    return _header(tile, FLAG_DEFLATE if compress else 0) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TileFormatError(f"truncated header: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_tile(buf: bytes) -> EmbeddingTile:
    if bytes(buf[:4]) != MAGIC:
        raise TileFormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.take(4)
    version, flags, id_len = r.unpack("<HHH")
    if version != VERSION:
        raise TileFormatError(f"unsupported tile version {version}")
    if flags & ~FLAG_DEFLATE:
        raise TileFormatError(f"unknown flag bits 0x{flags:04x}")
    tile_id = bytes(r.take(id_len)).decode("utf-8")
    year, T, H, W, d = r.unpack("<HHIIB")
    if d == 0:
        raise TileFormatError("tile declares zero latent dimensions")
    levels = r.unpack(f"<{d}H")
    try:
        spec = FsqSpec(levels)
    except ValueError as exc:
        raise TileFormatError(f"invalid level header {levels}: {exc}") from None
    payload = bytes(r.buf[r.pos :])
    n_bytes = 2 * T * H * W
    if flags & FLAG_DEFLATE:
        try:
            dec = zlib.decompressobj(-15)
            data = dec.decompress(payload, n_bytes + 1)
        except zlib.error as exc:
            raise TileFormatError(f"corrupt DEFLATE payload: {exc}") from None
        if not dec.eof:
            raise TileFormatError(f"truncated payload: DEFLATE stream ended early ({len(data)} of {n_bytes} bytes)")
        if dec.unused_data:
            raise TileFormatError(f"{len(dec.unused_data)} trailing bytes after DEFLATE stream")
        payload = data
    if len(payload) < n_bytes:
        raise TileFormatError(f"truncated payload: {len(payload)} of {n_bytes} bytes")
    if len(payload) > n_bytes:
        raise TileFormatError(f"payload has {len(payload) - n_bytes} bytes beyond [{T}, {H}, {W}]")
    codes = np.frombuffer(payload, dtype="<u2").reshape(T, H, W).astype(np.uint16)
    if codes.size and int(codes.max()) >= spec.codebook_size:
        raise TileFormatError(f"code {int(codes.max())} >= codebook size {spec.codebook_size}")
    return EmbeddingTile(tile_id, year, codes, levels)


def tile_path(root, year: int, tile_id: str) -> Path:
    return Path(root) / str(year) / f"{tile_id}.esd"


def write_tile(root, tile: EmbeddingTile, compress: bool = True) -> Path:
    path = tile_path(root, tile.year, tile.tile_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".esd.tmp")
    tmp.write_bytes(pack_tile(tile, compress))
    tmp.replace(path)
    return path


def read_tile(path) -> EmbeddingTile:
    return unpack_tile(Path(path).read_bytes())


@dataclass(frozen=True)
class VolumeReport:
    baseline_tile_bytes: float
    stored_tile_bytes: float
    n_tiles_region: int
    n_tiles_global: int

    @property
    def ratio(self) -> float:
        return self.baseline_tile_bytes / self.stored_tile_bytes

    @property
    def region_baseline_bytes(self) -> float:
        return self.baseline_tile_bytes * self.n_tiles_region

    @property
    def region_stored_bytes(self) -> float:
        return self.stored_tile_bytes * self.n_tiles_region

    @property
    def global_baseline_bytes(self) -> float:
        return self.baseline_tile_bytes * self.n_tiles_global

    @property
    def global_stored_bytes(self) -> float:
        return self.stored_tile_bytes * self.n_tiles_global

    def rows(self) -> list[tuple[str, str, str, str]]:
        return [
            ("volume", "per tile", f"region ({self.n_tiles_region} tiles)", f"global ({self.n_tiles_global} tiles)"),
            ("baseline", human_bytes(self.baseline_tile_bytes), human_bytes(self.region_baseline_bytes),
             human_bytes(self.global_baseline_bytes)),
            ("embedding", human_bytes(self.stored_tile_bytes), human_bytes(self.region_stored_bytes),
             human_bytes(self.global_stored_bytes)),
        ]

    def to_text(self) -> str:
        lines = ["\t".join(r) for r in self.rows()]
        lines.append(f"compression ratio\t{self.ratio:.1f}")
        return "\n".join(lines)


def volume_report(tile_bytes: float, n_tiles_region: int, n_tiles_global: int,
                  baseline_tile_bytes: float) -> VolumeReport:
    if baseline_tile_bytes <= 0:
        raise ValueError(f"baseline tile size must be positive, got {baseline_tile_bytes}")
    if tile_bytes <= 0:
        raise ValueError(f"stored tile size must be positive, got {tile_bytes}")
    if n_tiles_region < 0 or n_tiles_global < 0:
        raise ValueError("tile counts must be non-negative")
    return VolumeReport(float(baseline_tile_bytes), float(tile_bytes), int(n_tiles_region), int(n_tiles_global))


def human_bytes(n: float) -> str:
    for unit, size in (("PB", 1 << 50), ("TB", TB), ("GB", GB), ("MB", MB), ("KB", 1 << 10)):
        if n >= size:
            return f"{n / size:.1f} {unit}"
    return f"{n:.0f} B"
