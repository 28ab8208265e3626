"""Host-side compiler: stripe planning, instruction lowering, program build.

A network plus its packed weights compiles into a per-instance instruction
stream. Convolution layers are split into stripes (bands of output tile rows)
that fit on-chip memory; each stripe past the first also recomputes the last
output tile row of its predecessor from reloaded input rows, so splitting a
layer costs extra MACs. That recompute is the striping overhead the cycle
model charges and the ideal-throughput metric credits.

Padding and max-pooling lower to pad/pool-unit instructions: each reads one
input tile, forms up to four maxes over selectable value sets, and replaces
selected output values. Windows contained in a single input tile lower
directly; windows that straddle tiles take two passes through a scratch tile
(partial maxes first, then a combining max), since an instruction sees only
one input tile and selectors replace rather than combine.

Fully connected layers run host-side as integer matrix-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netmodel, packer
from .layout import TILE, TILE_VALUES, BankConfig, Stripe
from .numerics import LayerQuant, check_acc_bound, requantize_array
from .oracle import fold_bias

FILTERS_PER_GROUP = packer.FILTERS_PER_GROUP


class PlanningError(ValueError):
    """A layer cannot be striped into the available capacity."""


class CompileError(ValueError):
    pass


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvInstr:
    """One output tile group: 4 OFM tiles of one filter group at (ty, tx).

    Channel partition, packed stream, quantization, and bias initialization
    are layer-wide and live on the owning ConvLayerProgram. ``recompute``
    marks boundary rows re-executed for striping; their MACs count as
    striping overhead, their cycles as ordinary compute time.
    """

    stripe: int
    ty: int
    tx: int
    filter_group: int
    recompute: bool = False


@dataclass(frozen=True)
class TileRef:
    space: str  # "in" | "out" | "scratch"
    channel: int
    ty: int
    tx: int


@dataclass(frozen=True)
class PadPoolInstr:
    """One pad/pool-unit step: four masked maxes over one input tile.

    ``masks`` are 16-bit selections over the input tile's values; selector
    -1 keeps the old output value, k >= 0 replaces it with max k.
    """

    src: TileRef
    dst: TileRef
    masks: tuple[int, int, int, int]
    selectors: tuple[int, ...]

    def __post_init__(self):
        if len(self.selectors) != TILE_VALUES:
            raise CompileError("selectors must cover all 16 outputs")
        for sel in self.selectors:
            if sel >= 0 and not (self.masks[sel] & 0xFFFF):
                raise CompileError(f"selector references empty mask {sel}")


# ---------------------------------------------------------------------------
# Stripe planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StripeBand:
    """One stripe of a conv layer, in output tile rows.

    [band_start, band_end) is the stripe's own slice of the output;
    [ofm_start, ofm_end) additionally includes the recomputed boundary row
    for stripes after the first. The resident input rows are the computed
    rows plus a one-tile-row halo below, clamped to the real grid.
    """

    index: int
    band_start: int
    band_end: int
    ofm_start: int
    ofm_end: int
    ifm_start: int
    ifm_end: int

    @property
    def ofm_rows(self) -> int:
        return self.ofm_end - self.ofm_start

    @property
    def ifm_rows(self) -> int:
        return self.ifm_end - self.ifm_start

    @property
    def band(self) -> Stripe:
        """The stripe's own disjoint slice of the output tile rows."""
        return Stripe(self.band_start, self.band_end - self.band_start)


@dataclass
class LayerStripePlan:
    name: str
    stripe_height: int
    bands: list[StripeBand]
    ifm_tiles: list[int]  # per stripe working set, input side
    ofm_tiles: list[int]
    weight_tiles: int  # dense-equivalent scratchpad footprint, not bank-resident
    overhead_macs: int  # dense MACs of the recomputed boundary rows
    dense_macs: int

    @property
    def num_stripes(self) -> int:
        return len(self.bands)

    @property
    def overhead_ratio(self) -> float:
        return self.overhead_macs / self.dense_macs if self.dense_macs else 0.0


@dataclass
class StripePlan:
    per_layer: dict[str, LayerStripePlan]

    def mean_overhead_ratio(self) -> float:
        ratios = [p.overhead_ratio for p in self.per_layer.values()]
        return sum(ratios) / len(ratios) if ratios else 0.0


def _bands_for_height(h: int, tr_out: int, tr_in: int) -> list[StripeBand]:
    bands = []
    start = 0
    i = 0
    while start < tr_out:
        end = min(start + h, tr_out)
        ofm_start = start - 1 if i > 0 else 0
        ifm_end = min(end + 1, tr_in)
        bands.append(StripeBand(i, start, end, ofm_start, end, ofm_start, ifm_end))
        start = end
        i += 1
    return bands


def plan_conv_stripes(
    name: str,
    in_shape: tuple[int, int, int],
    out_shape: tuple[int, int, int],
    kernel: int,
    cfg: BankConfig,
) -> LayerStripePlan:
    """Choose the maximal uniform stripe height whose worst stripe fits.

    The working set of a stripe is its resident input tiles plus its output
    tiles; packed weights stream through scratchpad memory and do not count
    against the bank capacity.
    """
    c_in, h_in, w_in = in_shape
    c_out, h_out, w_out = out_shape
    tr_in, tc_in = _ceil_div(h_in, TILE), _ceil_div(w_in, TILE)
    tr_out, tc_out = _ceil_div(h_out, TILE), _ceil_div(w_out, TILE)
    capacity = cfg.total_tiles
    dense = h_out * w_out * c_out * c_in * kernel * kernel

    for h in range(tr_out, 0, -1):
        bands = _bands_for_height(h, tr_out, tr_in)
        ifm_tiles = [c_in * tc_in * b.ifm_rows for b in bands]
        ofm_tiles = [c_out * tc_out * b.ofm_rows for b in bands]
        if all(i + o <= capacity for i, o in zip(ifm_tiles, ofm_tiles)):
            overhead = (len(bands) - 1) * TILE * w_out * c_out * c_in * kernel * kernel
            return LayerStripePlan(
                name,
                h,
                bands,
                ifm_tiles,
                ofm_tiles,
                packer.padded_filters(c_out) * c_in,
                overhead,
                dense,
            )
    raise PlanningError(
        f"{name}: a single tile row exceeds bank capacity "
        f"({c_in * tc_in * 2 + c_out * tc_out} tiles > {capacity})"
    )


def plan_stripes(m: netmodel.NetworkModel, cfg: BankConfig) -> StripePlan:
    """Stripe every conv layer of the model against the bank capacity."""
    shapes = m.in_out_shapes()
    plans = {}
    for l in m.layers:
        if isinstance(l, netmodel.ConvLayer):
            in_shape, out_shape = shapes[l.name]
            plans[l.name] = plan_conv_stripes(l.name, in_shape, out_shape, l.kernel, cfg)
    return StripePlan(plans)


# ---------------------------------------------------------------------------
# Pad / pool lowering
# ---------------------------------------------------------------------------

def _bit(y: int, x: int) -> int:
    return 1 << (TILE * y + x)


def lower_pad_tile(oty: int, otx: int, border: int, h_out: int, w_out: int):
    """Instructions (channel-agnostic) for one output tile of a pad layer.

    Returns [(src (sty, stx), masks, selectors)]. Border outputs have no
    source: the output tile starts zeroed and keeps them.
    """
    by_src: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for p in range(TILE_VALUES):
        gy, gx = TILE * oty + p // TILE, TILE * otx + p % TILE
        if gy >= h_out or gx >= w_out:
            continue
        sy, sx = gy - border, gx - border
        if not (0 <= sy < h_out - 2 * border and 0 <= sx < w_out - 2 * border):
            continue  # zero border, kept
        by_src.setdefault((sy // TILE, sx // TILE), []).append((p, _bit(sy % TILE, sx % TILE)))
    instrs = []
    for src, pairs in sorted(by_src.items()):
        for i in range(0, len(pairs), 4):
            chunk = pairs[i : i + 4]
            masks = [0, 0, 0, 0]
            selectors = [-1] * TILE_VALUES
            for k, (p, mask) in enumerate(chunk):
                masks[k] = mask
                selectors[p] = k
            instrs.append((src, tuple(masks), tuple(selectors)))
    return instrs


def _window_tiles(rows: range, cols: range) -> dict[tuple[int, int], int]:
    """Split a pixel window into per-tile masks, keyed by (sty, stx)."""
    masks: dict[tuple[int, int], int] = {}
    for y in rows:
        for x in cols:
            key = (y // TILE, x // TILE)
            masks[key] = masks.get(key, 0) | _bit(y % TILE, x % TILE)
    return masks


def lower_pool_tile(
    oty: int,
    otx: int,
    window: tuple[int, int],
    stride: tuple[int, int],
    out_shape: tuple[int, int],
    scratch_base: int,
):
    """Instructions for one output tile of a max-pool layer.

    Outputs whose window sits in one input tile lower directly. Straddling
    windows take two passes: partial maxes land in a scratch tile (4 slots
    per output), then one instruction combines them. Returns
    (instrs, scratch_used) where src/dst are ('in'|'out'|'scratch', ty, tx).
    """
    h_out, w_out = out_shape
    wh, ww = window
    sh, sw = stride
    direct: dict[tuple[int, int], list[tuple[int, int]]] = {}
    crossing: list[tuple[int, list[tuple[tuple[int, int], int]]]] = []
    for p in range(TILE_VALUES):
        gy, gx = TILE * oty + p // TILE, TILE * otx + p % TILE
        if gy >= h_out or gx >= w_out:
            continue
        tiles = _window_tiles(range(gy * sh, gy * sh + wh), range(gx * sw, gx * sw + ww))
        if len(tiles) == 1:
            (src, mask), = tiles.items()
            direct.setdefault(src, []).append((p, mask))
        else:
            crossing.append((p, sorted(tiles.items())))

    instrs = []
    for src, pairs in sorted(direct.items()):
        for i in range(0, len(pairs), 4):
            chunk = pairs[i : i + 4]
            masks = [0, 0, 0, 0]
            selectors = [-1] * TILE_VALUES
            for k, (p, mask) in enumerate(chunk):
                masks[k] = mask
                selectors[p] = k
            instrs.append((("in",) + src, ("out", oty, otx), tuple(masks), tuple(selectors)))

    scratch_used = 0
    for g in range(0, len(crossing), 4):
        group = crossing[g : g + 4]
        scratch = ("scratch", 0, scratch_base + scratch_used)
        scratch_used += 1
        # pass 1: per contributing input tile, partial maxes into slots 4k+j
        srcs = sorted({src for _, tiles in group for src, _ in tiles})
        for src in srcs:
            masks = [0, 0, 0, 0]
            selectors = [-1] * TILE_VALUES
            used = False
            for k, (_, tiles) in enumerate(group):
                for j, (tsrc, mask) in enumerate(tiles):
                    if tsrc == src:
                        masks[k] = mask
                        selectors[4 * k + j] = k
                        used = True
            if used:
                instrs.append((("in",) + src, scratch, tuple(masks), tuple(selectors)))
        # pass 2: combine each output's partial slots
        masks = [0, 0, 0, 0]
        selectors = [-1] * TILE_VALUES
        for k, (p, tiles) in enumerate(group):
            masks[k] = sum(1 << (4 * k + j) for j in range(len(tiles)))
            selectors[p] = k
        instrs.append((scratch, ("out", oty, otx), tuple(masks), tuple(selectors)))
    return instrs, scratch_used


# ---------------------------------------------------------------------------
# Layer programs
# ---------------------------------------------------------------------------

@dataclass
class ConvLayerProgram:
    name: str
    kind: str
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    kernel: int
    quant: LayerQuant
    bias_acc: np.ndarray  # (c_out,) int64 accumulator initialization
    nnz: np.ndarray  # (padded filters, channels) nonzero counts
    plan: LayerStripePlan
    stripe_instances: list[int]  # stripe index -> accelerator instance
    packed: packer.PackedLayer | None = None
    instrs: list[list[ConvInstr]] | None = None  # per instance
    dma: list[dict] = field(default_factory=list)

    @property
    def c_in(self) -> int:
        return self.in_shape[0]

    @property
    def c_out(self) -> int:
        return self.out_shape[0]

    @property
    def filter_groups(self) -> int:
        return self.nnz.shape[0] // FILTERS_PER_GROUP

    @property
    def tc_out(self) -> int:
        return _ceil_div(self.out_shape[2], TILE)

    @property
    def dense_macs(self) -> int:
        return self.plan.dense_macs

    @property
    def executed_macs(self) -> int:
        h_out, w_out = self.out_shape[1], self.out_shape[2]
        return int(self.nnz[: self.c_out].sum()) * h_out * w_out


@dataclass
class PadPoolLayerProgram:
    name: str
    kind: str  # "pad" | "maxpool"
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    params: dict
    instr_counts: list[int]  # per instance
    scratch_tiles: int
    instrs: list[list[PadPoolInstr]] | None = None  # per instance


@dataclass
class HostOp:
    name: str
    kind: str  # "fc" | "flatten"


@dataclass
class Program:
    """Compiled instruction streams plus the model they were built from."""

    model: netmodel.NetworkModel
    instances: int
    bank_cfg: BankConfig
    filters_per_group: int
    staging_units: int
    layers: list = field(default_factory=list)

    def conv_layers(self) -> list[ConvLayerProgram]:
        return [l for l in self.layers if isinstance(l, ConvLayerProgram)]


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------

def _conv_instrs_for_stripe(band: StripeBand, tc_out: int, filter_groups: int):
    out = []
    for ty in range(band.ofm_start, band.ofm_end):
        recompute = band.index > 0 and ty < band.band_start
        for tx in range(tc_out):
            for fg in range(filter_groups):
                out.append(ConvInstr(band.index, ty, tx, fg, recompute))
    return out


def _lower_padpool_layer(
    l, in_shape, out_shape, instances: int, materialize: bool
) -> PadPoolLayerProgram:
    c, h_out, w_out = out_shape
    tr_out, tc_out = _ceil_div(h_out, TILE), _ceil_div(w_out, TILE)

    per_tile: list[list] = []  # lowered template per (ty, tx), channel-agnostic
    scratch = 0
    if isinstance(l, netmodel.PadLayer):
        kind, params = "pad", {"border": l.border}
        for ty in range(tr_out):
            for tx in range(tc_out):
                tmpl = [
                    (("in",) + src, ("out", ty, tx), masks, sels)
                    for src, masks, sels in lower_pad_tile(ty, tx, l.border, h_out, w_out)
                ]
                per_tile.append(tmpl)
    else:
        kind, params = "maxpool", {"window": l.window, "stride": l.stride}
        for ty in range(tr_out):
            for tx in range(tc_out):
                tmpl, used = lower_pool_tile(ty, tx, l.window, l.stride, (h_out, w_out), scratch)
                scratch += used
                per_tile.append(tmpl)

    counts = [0] * instances
    instrs: list[list[PadPoolInstr]] | None = [[] for _ in range(instances)] if materialize else None
    tiles = tr_out * tc_out
    for ch in range(c):
        for t in range(tiles):
            inst = (ch * tiles + t) % instances
            counts[inst] += len(per_tile[t])
            if instrs is not None:
                for src, dst, masks, sels in per_tile[t]:
                    instrs[inst].append(
                        PadPoolInstr(
                            TileRef(src[0], ch, src[1], src[2]),
                            TileRef(dst[0], ch, dst[1], dst[2]),
                            masks,
                            sels,
                        )
                    )
    return PadPoolLayerProgram(l.name, kind, in_shape, out_shape, params, counts, scratch, instrs)


def compile_program(
    m: netmodel.NetworkModel,
    packed: dict[str, packer.PackedLayer] | None,
    bank_cfg: BankConfig,
    instances: int = 1,
    filters_per_group: int = FILTERS_PER_GROUP,
    staging_units: int = 4,
    nnz: dict[str, np.ndarray] | None = None,
    materialize: bool = True,
) -> Program:
    """Compile a model into per-instance instruction streams.

    Functional execution needs ``packed`` streams; a cycle-only build may
    pass ``nnz`` matrices instead (with ``materialize=False``).
    """
    if instances not in (1, 2):
        raise CompileError(f"instances must be 1 or 2, got {instances}")
    if packed is None and nnz is None:
        raise CompileError("need packed streams or nnz matrices")
    if packed is None and materialize:
        raise CompileError("functional compilation requires packed streams")

    shapes = m.in_out_shapes()
    scales = m.activation_scales()
    plans = plan_stripes(m, bank_cfg)
    prog = Program(m, instances, bank_cfg, filters_per_group, staging_units)

    for l in m.layers:
        in_shape, out_shape = shapes[l.name]
        if isinstance(l, netmodel.ConvLayer):
            if packed is not None:
                if l.name not in packed:
                    raise CompileError(f"{l.name}: no packed weight stream")
                pl = packed[l.name]
                layer_nnz = pl.nnz_matrix()
            else:
                pl = None
                if l.name not in nnz:
                    raise CompileError(f"{l.name}: no nnz matrix")
                layer_nnz = np.asarray(nnz[l.name])
                if layer_nnz.shape != (packer.padded_filters(l.out_channels), l.in_channels):
                    raise CompileError(f"{l.name}: nnz matrix shape {layer_nnz.shape} is wrong")
            bias = fold_bias(
                m.biases.get(l.name),
                l.weight_scale or 1.0,
                scales[l.name],
                l.out_channels,
            )
            check_acc_bound(l.kernel, l.in_channels, int(np.abs(bias).max(initial=0)))
            plan = plans.per_layer[l.name]
            stripe_instances = [b.index % instances for b in plan.bands]
            quant = LayerQuant(l.weight_scale or 1.0, l.act_shift, l.relu)
            lp = ConvLayerProgram(
                l.name,
                "conv",
                in_shape,
                out_shape,
                l.kernel,
                quant,
                bias,
                layer_nnz,
                plan,
                stripe_instances,
                pl,
            )
            lp.dma = [
                {
                    "stripe": b.index,
                    "in_tile_rows": (b.ifm_start, b.ifm_end),
                    "out_tile_rows": (b.ofm_start, b.ofm_end),
                }
                for b in plan.bands
            ]
            if materialize:
                lp.instrs = [[] for _ in range(instances)]
                for b in plan.bands:
                    lp.instrs[stripe_instances[b.index]].extend(
                        _conv_instrs_for_stripe(b, lp.tc_out, lp.filter_groups)
                    )
            prog.layers.append(lp)
        elif isinstance(l, (netmodel.PadLayer, netmodel.MaxPoolLayer)):
            prog.layers.append(
                _lower_padpool_layer(l, in_shape, out_shape, instances, materialize)
            )
        elif isinstance(l, netmodel.FlattenLayer):
            prog.layers.append(HostOp(l.name, "flatten"))
        elif isinstance(l, netmodel.FullyConnectedLayer):
            prog.layers.append(HostOp(l.name, "fc"))
    return prog


def dump_program(prog: Program) -> str:
    """Human-readable listing, one instruction per line."""
    lines = [
        f"# program: instances={prog.instances} filters_per_group={prog.filters_per_group}"
    ]
    for lp in prog.layers:
        if isinstance(lp, ConvLayerProgram):
            lines.append(
                f"# layer {lp.name}: conv k={lp.kernel} {lp.in_shape}->{lp.out_shape} "
                f"stripes={lp.plan.num_stripes}"
            )
            if lp.instrs is None:
                lines.append("#   (not materialized)")
                continue
            for inst, instrs in enumerate(lp.instrs):
                for i in instrs:
                    lines.append(
                        f"CONV {lp.name} inst={inst} stripe={i.stripe} ty={i.ty} tx={i.tx} "
                        f"fg={i.filter_group} recompute={int(i.recompute)}"
                    )
        elif isinstance(lp, PadPoolLayerProgram):
            lines.append(f"# layer {lp.name}: {lp.kind} {lp.in_shape}->{lp.out_shape}")
            if lp.instrs is None:
                lines.append("#   (not materialized)")
                continue
            for inst, instrs in enumerate(lp.instrs):
                for i in instrs:
                    sels = ",".join(str(s) for s in i.selectors)
                    lines.append(
                        f"PADPOOL {lp.name} inst={inst} "
                        f"src={i.src.space}:c{i.src.channel}:({i.src.ty},{i.src.tx}) "
                        f"dst={i.dst.space}:c{i.dst.channel}:({i.dst.ty},{i.dst.tx}) "
                        f"masks={[hex(m) for m in i.masks]} sel=[{sels}]"
                    )
        else:
            lines.append(f"HOST {lp.name} kind={lp.kind}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Host-side fully connected execution
# ---------------------------------------------------------------------------

def run_fc_host(m: netmodel.NetworkModel, l: netmodel.FullyConnectedLayer, x: np.ndarray) -> np.ndarray:
    """Integer matrix-vector product with the layer's quantization."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size != l.in_features:
        raise CompileError(f"{l.name}: input has {x.size} features, expects {l.in_features}")
    if not m.is_quantized(l.name):
        raise CompileError(f"{l.name}: model must be quantized")
    w = m.weights[l.name].astype(np.int64)
    quant = LayerQuant(l.weight_scale or 1.0, l.act_shift, l.relu)
    bias = fold_bias(
        m.biases.get(l.name), quant.weight_scale, m.activation_scales()[l.name], l.out_features
    )
    acc = w @ x + bias
    return requantize_array(acc, quant)
