"""Tiled feature-map layout: 4x4 tiles, row-major tile grids, stripes, banks.

A feature map is stored per channel as a row-major grid of 4x4 tiles; a tile
is the atomic unit of SRAM access (16 values read or written per cycle per
bank). Logical value (c, y, x) lives at tile (x // 4, y // 4), intra-tile
position (y % 4, x % 4). Tile slots beyond the logical width/height are
canonical zero at construction time.

Tensors that feed convolution are addressable one tile past the grid edge in
each direction: out-of-grid tile reads return the zero tile, so assembling
the 8x8 input block for any output tile coordinate is total.

The on-disk image format is little-endian: a 5-field u32 header
(channels, width, height, tile_cols, tile_rows) followed by tiles in storage
order, 16 bytes per tile (bit 7 = sign, bits 6..0 = magnitude).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import MAG_MAX

TILE = 4
TILE_VALUES = TILE * TILE

_HEADER = struct.Struct("<5I")


class LayoutError(ValueError):
    """Shape or addressing violation in the tiled layout."""


class CapacityError(LayoutError):
    """A bank assignment exceeds its tile capacity."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class TiledTensor:
    """Multi-channel feature map as per-channel row-major tile grids.

    ``tiles`` has shape (channels, tile_rows, tile_cols, 4, 4), dtype int16,
    holding signed sign-magnitude values. The linear storage order of tiles
    is c * tile_rows * tile_cols + ty * tile_cols + tx.
    """

    channels: int
    height: int
    width: int
    tiles: np.ndarray

    def __post_init__(self):
        expect = (self.channels, self.tile_rows, self.tile_cols, TILE, TILE)
        if self.tiles.shape != expect:
            raise LayoutError(f"tile array shape {self.tiles.shape} != {expect}")

    @property
    def tile_rows(self) -> int:
        return _ceil_div(self.height, TILE)

    @property
    def tile_cols(self) -> int:
        return _ceil_div(self.width, TILE)

    @property
    def tile_count(self) -> int:
        return self.channels * self.tile_rows * self.tile_cols

    def get_tile(self, c: int, tx: int, ty: int) -> np.ndarray:
        """Tile at grid position (tx, ty); zero tile when out of grid."""
        if not 0 <= c < self.channels:
            raise LayoutError(f"channel {c} out of range [0, {self.channels})")
        if 0 <= tx < self.tile_cols and 0 <= ty < self.tile_rows:
            return self.tiles[c, ty, tx]
        return np.zeros((TILE, TILE), dtype=np.int16)

    def set_tile(self, c: int, tx: int, ty: int, values: np.ndarray) -> None:
        if not (0 <= c < self.channels and 0 <= tx < self.tile_cols and 0 <= ty < self.tile_rows):
            raise LayoutError(f"tile write out of grid: c={c} tx={tx} ty={ty}")
        self.tiles[c, ty, tx] = values

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "TiledTensor":
        tr, tc = _ceil_div(height, TILE), _ceil_div(width, TILE)
        return cls(channels, height, width, np.zeros((channels, tr, tc, TILE, TILE), dtype=np.int16))


def tile_tensor(planar, channels: int, width: int, height: int) -> TiledTensor:
    """Reorder a per-channel row-major scalar array into tiled layout.

    ``planar`` holds channels*height*width signed values in [-127, 127];
    slots past the logical extent are zero-filled.
    """
    flat = np.asarray(planar, dtype=np.int64).reshape(-1)
    if flat.size != channels * width * height:
        raise LayoutError(
            f"planar size {flat.size} != channels*width*height = {channels * width * height}"
        )
    if flat.size and (flat.max() > MAG_MAX or flat.min() < -MAG_MAX):
        raise LayoutError("values outside sign-magnitude range [-127, 127]")
    chw = flat.reshape(channels, height, width).astype(np.int16)
    tr, tc = _ceil_div(height, TILE), _ceil_div(width, TILE)
    padded = np.zeros((channels, tr * TILE, tc * TILE), dtype=np.int16)
    padded[:, :height, :width] = chw
    tiles = padded.reshape(channels, tr, TILE, tc, TILE).transpose(0, 1, 3, 2, 4).copy()
    return TiledTensor(channels, height, width, tiles)


def untile_tensor(t: TiledTensor) -> np.ndarray:
    """Inverse of :func:`tile_tensor`: flat (c, y, x) row-major values."""
    tr, tc = t.tile_rows, t.tile_cols
    padded = t.tiles.transpose(0, 1, 3, 2, 4).reshape(t.channels, tr * TILE, tc * TILE)
    return padded[:, : t.height, : t.width].reshape(-1).copy()


def read_block_2x2(t: TiledTensor, c: int, tx: int, ty: int) -> np.ndarray:
    """The 8x8 pixel block anchored at tile (tx, ty): four contiguous tiles.

    The anchor must lie in the tile grid; the +1 neighbours may fall past the
    edge and read as zero tiles.
    """
    if not (0 <= tx < t.tile_cols and 0 <= ty < t.tile_rows):
        raise LayoutError(
            f"block anchor ({tx}, {ty}) outside tile grid {t.tile_cols}x{t.tile_rows}"
        )
    return np.block(
        [
            [t.get_tile(c, tx, ty), t.get_tile(c, tx + 1, ty)],
            [t.get_tile(c, tx, ty + 1), t.get_tile(c, tx + 1, ty + 1)],
        ]
    )


@dataclass(frozen=True)
class Stripe:
    """A band of tile rows spanning the full width of a feature map."""

    first_tile_row: int
    num_tile_rows: int

    def __post_init__(self):
        if self.first_tile_row < 0 or self.num_tile_rows <= 0:
            raise LayoutError(f"bad stripe {self}")


@dataclass(frozen=True)
class BankConfig:
    """On-chip SRAM bank geometry: dual-ported, one tile per port per cycle."""

    num_banks: int = 4
    tiles_per_bank: int = 10000
    reads_per_cycle: int = 1

    def __post_init__(self):
        if self.num_banks < 1 or self.tiles_per_bank < 1:
            raise LayoutError(f"bad bank config {self}")

    @property
    def total_tiles(self) -> int:
        return self.num_banks * self.tiles_per_bank


# Capacity presets. "arria10-sx660" is calibrated, not measured: it is sized
# so that full VGG-16 striping recompute overhead averages ~15% across the
# conv layers, within the 10-20% band the model targets.
BANK_PRESETS = {
    "arria10-sx660": BankConfig(num_banks=4, tiles_per_bank=10000),
}


@dataclass
class BankPlan:
    """Round-robin channel-to-bank assignment with per-bank tile counts."""

    channels_per_bank: list[list[int]]
    tiles_per_bank_used: list[int]
    config: BankConfig = field(repr=False, default=BankConfig())


def plan_banks(t: TiledTensor, cfg: BankConfig, staging_units: int) -> BankPlan:
    """Assign channel c to bank (c mod staging_units) and check capacity."""
    if staging_units != cfg.num_banks:
        raise LayoutError(
            f"staging_units ({staging_units}) must equal num_banks ({cfg.num_banks})"
        )
    channels = [[c for c in range(t.channels) if c % staging_units == b] for b in range(cfg.num_banks)]
    per_channel = t.tile_rows * t.tile_cols
    counts = [len(chs) * per_channel for chs in channels]
    for b, n in enumerate(counts):
        if n > cfg.tiles_per_bank:
            raise CapacityError(
                f"bank {b} needs {n} tiles but holds {cfg.tiles_per_bank}"
            )
    return BankPlan(channels, counts, cfg)


# ---------------------------------------------------------------------------
# Tiled memory image dump / load
# ---------------------------------------------------------------------------

def dump_tiled_image(t: TiledTensor) -> bytes:
    """Serialize a tiled tensor to the binary memory-image format."""
    header = _HEADER.pack(t.channels, t.width, t.height, t.tile_cols, t.tile_rows)
    flat = t.tiles.reshape(-1).astype(np.int64)
    body = np.where(flat < 0, 0x80 | -flat, flat).astype(np.uint8).tobytes()
    return header + body


def load_tiled_image(data: bytes) -> TiledTensor:
    """Parse a memory image; strict about sizes and the canonical-zero byte."""
    if len(data) < _HEADER.size:
        raise LayoutError("truncated image: missing header")
    channels, width, height, tile_cols, tile_rows = _HEADER.unpack_from(data)
    if channels < 1 or width < 1 or height < 1:
        raise LayoutError(f"bad image dims c={channels} w={width} h={height}")
    if tile_cols != _ceil_div(width, TILE) or tile_rows != _ceil_div(height, TILE):
        raise LayoutError("header tile grid inconsistent with width/height")
    body = data[_HEADER.size :]
    expect = channels * tile_rows * tile_cols * TILE_VALUES
    if len(body) != expect:
        raise LayoutError(f"image body is {len(body)} bytes, expected {expect}")
    raw = np.frombuffer(body, dtype=np.uint8).astype(np.int16)
    if np.any(raw == 0x80):
        raise LayoutError("non-canonical negative zero byte 0x80 in image")
    vals = np.where(raw & 0x80, -(raw & 0x7F), raw)
    tiles = vals.astype(np.int16).reshape(channels, tile_rows, tile_cols, TILE, TILE)
    return TiledTensor(channels, height, width, tiles)


def write_tiled_image(t: TiledTensor, path) -> None:
    with open(path, "wb") as f:
        f.write(dump_tiled_image(t))


def read_tiled_image(path) -> TiledTensor:
    with open(path, "rb") as f:
        return load_tiled_image(f.read())
