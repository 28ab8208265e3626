"""Offline zero-weight packing and the packed binary stream format.

Each (filter, channel) kernel occupies one 4x4 weight tile: kernel value
(i, j) sits at intra-tile offset 4*i + j, and offsets outside the k x k
support are zero. Packing keeps only the nonzero weights as (offset, weight)
records in ascending offset order. Four filters are grouped so their tiles
at one position stream concurrently; feeding a group costs at least 4 cycles
(the four input tiles must be preloaded, one per cycle), so a group's cycle
count is max(4, largest entry count among its four tiles).

Per-layer stream format (little-endian):

    magic "ZSKP" | version u8 | layer_index u32
    then per group, in canonical order, 4 sub-streams:
        count u8 | count x (offset u8, weight u8: bit7 sign, bits6..0 mag)

Canonical group order is filter-group outer, then channel ascending (which
round-robins across the four staging units), then weight-tile position
(a single position for kernels up to 4x4). The stream carries no group keys;
a reader re-derives them from the layer's channel counts. A multi-layer
file wraps per-layer streams in a length-prefixed container (see
``serialize_network``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import netmodel
from .layout import TILE, TILE_VALUES
from .numerics import decode_byte, encode_byte

MAGIC = b"ZSKP"
NET_MAGIC = b"ZSKN"
VERSION = 1
FILTERS_PER_GROUP = 4
GROUP_CYCLE_FLOOR = 4


class PackError(ValueError):
    """Packing precondition violation."""


class FormatError(ValueError):
    """Malformed packed stream."""


@dataclass(frozen=True)
class PackedEntry:
    offset: int  # 0..15, row-major intra-tile position
    weight: int  # signed value, nonzero, |weight| <= 127

    def __post_init__(self):
        if not 0 <= self.offset < TILE_VALUES:
            raise FormatError(f"offset {self.offset} out of tile range")
        if self.weight == 0:
            raise FormatError("zero-magnitude packed entry")


@dataclass(frozen=True)
class PackedWeightTile:
    """Nonzero weights of one tile in ascending offset order."""

    entries: tuple[PackedEntry, ...]

    def __post_init__(self):
        offs = [e.offset for e in self.entries]
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise FormatError(f"offsets not strictly increasing: {offs}")

    @property
    def nnz(self) -> int:
        return len(self.entries)


EMPTY_TILE = PackedWeightTile(())


@dataclass(frozen=True)
class PackedWeightGroup:
    """Streams for 4 concurrent filters at one (channel, tile position)."""

    filter_group: int
    channel: int
    tile_pos: int
    tiles: tuple[PackedWeightTile, PackedWeightTile, PackedWeightTile, PackedWeightTile]

    @property
    def cycles(self) -> int:
        return max(GROUP_CYCLE_FLOOR, max(t.nnz for t in self.tiles))

    @property
    def entry_count(self) -> int:
        return sum(t.nnz for t in self.tiles)


@dataclass
class PackedLayer:
    layer_index: int
    out_channels: int  # padded to a multiple of 4
    in_channels: int
    groups: list[PackedWeightGroup] = field(default_factory=list)

    @property
    def total_entries(self) -> int:
        return sum(g.entry_count for g in self.groups)

    def group(self, filter_group: int, channel: int) -> PackedWeightGroup:
        return self.groups[filter_group * self.in_channels + channel]

    def nnz_matrix(self) -> np.ndarray:
        """(padded filters, channels) nonzero counts, engine cost-model input."""
        out = np.zeros((self.out_channels, self.in_channels), dtype=np.int16)
        for g in self.groups:
            for slot, t in enumerate(g.tiles):
                out[g.filter_group * FILTERS_PER_GROUP + slot, g.channel] = t.nnz
        return out


def kernel_to_tile(kernel: np.ndarray) -> np.ndarray:
    """Embed a k x k kernel (k <= 4) into a 4x4 weight tile."""
    kernel = np.asarray(kernel)
    k = kernel.shape[0]
    if kernel.shape != (k, k) or k > TILE:
        raise PackError(f"kernel shape {kernel.shape} does not fit a 4x4 tile")
    tile = np.zeros((TILE, TILE), dtype=np.int16)
    tile[:k, :k] = kernel
    return tile


def pack_tile(tile: np.ndarray) -> PackedWeightTile:
    """Nonzero (offset, weight) records of one 4x4 tile, ascending offsets."""
    flat = np.asarray(tile, dtype=np.int64).reshape(-1)
    if flat.size != TILE_VALUES:
        raise PackError(f"weight tile must have 16 values, got {flat.size}")
    entries = tuple(
        PackedEntry(int(off), int(flat[off])) for off in np.flatnonzero(flat)
    )
    return PackedWeightTile(entries)


def unpack_tile(p: PackedWeightTile) -> np.ndarray:
    tile = np.zeros((TILE, TILE), dtype=np.int16)
    for e in p.entries:
        tile[e.offset // TILE, e.offset % TILE] = e.weight
    return tile


def padded_filters(out_channels: int) -> int:
    return -(-out_channels // FILTERS_PER_GROUP) * FILTERS_PER_GROUP


def pack_layer(weights: np.ndarray, layer_index: int = 0) -> PackedLayer:
    """Pack one conv layer's quantized weights, (out, in, k, k) integers."""
    if not np.issubdtype(weights.dtype, np.integer):
        raise PackError("pack requires quantized (integer) weights")
    f_real, c_in = weights.shape[0], weights.shape[1]
    f_pad = padded_filters(f_real)
    pl = PackedLayer(layer_index, f_pad, c_in)
    packed = {}
    for f in range(f_real):
        for c in range(c_in):
            packed[f, c] = pack_tile(kernel_to_tile(weights[f, c]))
    for fg in range(f_pad // FILTERS_PER_GROUP):
        for c in range(c_in):
            tiles = tuple(
                packed.get((fg * FILTERS_PER_GROUP + s, c), EMPTY_TILE)
                for s in range(FILTERS_PER_GROUP)
            )
            pl.groups.append(PackedWeightGroup(fg, c, 0, tiles))
    return pl


def pack_network(m: netmodel.NetworkModel) -> dict[str, PackedLayer]:
    """Pack every conv layer of a quantized model, keyed by layer name."""
    out = {}
    index = 0
    for l in m.layers:
        if isinstance(l, netmodel.ConvLayer):
            if not m.is_quantized(l.name):
                raise PackError(f"{l.name}: quantize before packing")
            out[l.name] = pack_layer(m.weights[l.name], index)
        index += 1
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def serialize_tile(t: PackedWeightTile) -> bytes:
    out = bytearray([t.nnz])
    for e in t.entries:
        out.append(e.offset)
        out.append(encode_byte(e.weight))
    return bytes(out)


def serialize_layer(pl: PackedLayer) -> bytes:
    out = bytearray(MAGIC)
    out.append(VERSION)
    out += struct.pack("<I", pl.layer_index)
    for g in pl.groups:
        for t in g.tiles:
            out += serialize_tile(t)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated stream at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def byte(self) -> int:
        return self.take(1)[0]


def _read_tile(r: _Reader) -> PackedWeightTile:
    count = r.byte()
    if count > TILE_VALUES:
        raise FormatError(f"tile entry count {count} exceeds 16")
    entries = []
    for _ in range(count):
        off = r.byte()
        try:
            w = decode_byte(r.byte())
        except ValueError as e:
            raise FormatError(str(e)) from e
        entries.append(PackedEntry(off, w))
    return PackedWeightTile(tuple(entries))


def deserialize_layer(data: bytes, in_channels: int, out_channels: int) -> PackedLayer:
    """Parse one layer stream; group keys are re-derived from the layer dims."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not a packed weight stream")
    version = r.byte()
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}")
    (layer_index,) = struct.unpack("<I", r.take(4))
    f_pad = padded_filters(out_channels)
    pl = PackedLayer(layer_index, f_pad, in_channels)
    for fg in range(f_pad // FILTERS_PER_GROUP):
        for c in range(in_channels):
            tiles = tuple(_read_tile(r) for _ in range(FILTERS_PER_GROUP))
            pl.groups.append(PackedWeightGroup(fg, c, 0, tiles))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after groups")
    return pl


def serialize_network(packed: dict[str, PackedLayer]) -> bytes:
    """Length-prefixed container of per-layer streams, keyed by layer name."""
    out = bytearray(NET_MAGIC)
    out.append(VERSION)
    out += struct.pack("<I", len(packed))
    for name, pl in packed.items():
        blob = serialize_layer(pl)
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<HH", pl.in_channels, pl.out_channels)
        out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def deserialize_network(data: bytes) -> dict[str, PackedLayer]:
    r = _Reader(data)
    if r.take(4) != NET_MAGIC:
        raise FormatError("bad magic, not a packed network file")
    if r.byte() != VERSION:
        raise FormatError("unsupported network file version")
    (count,) = struct.unpack("<I", r.take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode()
        c_in, c_out = struct.unpack("<HH", r.take(4))
        (blen,) = struct.unpack("<I", r.take(4))
        out[name] = deserialize_layer(r.take(blen), c_in, c_out)
    if r.pos != len(data):
        raise FormatError("trailing bytes after network container")
    return out
