"""The accelerator: functional execution plus an explicit cycle cost model.

Convolution streams packed (offset, weight) records: each record steers a
4x4 region of the preloaded 8x8 input block onto the 16 accumulators of the
output tile, one weight per cycle per filter, four filters in parallel per
staging unit. Feeding a weight tile costs at least 4 cycles (its four input
tiles preload at one tile per cycle), so a filter-group's cost per channel
is max(4, largest nonzero count among its four tiles); sparser filters in
the group sit in pipeline bubbles. The four staging units run over their
channel quarters and synchronize at a barrier per output tile group.

Cost model per conv instruction (one output tile group):

    compute = max over units of  sum over the unit's channels of
              max(4, max nnz among the group's four filters)
    total   = compute + pipeline_fill

Weight unpacking is charged one cycle per packed entry per staging unit,
once per layer stripe, and overlaps compute; only the excess beyond the
stripe's compute adds time. Stripes on one instance serialize; with two
instances a layer's elapsed time is the slower instance. Pad/pool
instructions cost one cycle each across four parallel units, plus one
pipeline fill per layer.

The same formulas drive both the functional executor (exact integer
results, toy scale) and the vectorized analytic estimator (full VGG-16
scale); the two agree cycle for cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import netmodel
from .driver import (
    ConvInstr,
    ConvLayerProgram,
    HostOp,
    PadPoolInstr,
    PadPoolLayerProgram,
    Program,
    run_fc_host,
)
from .fifo import BoundedFifo
from .layout import TILE, TILE_VALUES, TiledTensor, read_block_2x2, untile_tensor
from .numerics import requantize_array

GROUP_CYCLE_FLOOR = 4

# Free calibration parameter: cycles of pipeline fill/drain charged per
# output tile group. Calibrated (with the bank preset) against the published
# VGG-16 throughput of the hardware this models; override with
# --pipeline-fill for architecture studies.
DEFAULT_PIPELINE_FILL = 380


class EngineFault(RuntimeError):
    """Functional execution failed; message carries instruction context."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class EngineConfig:
    """Accelerator variant geometry and calibration knobs."""

    variant: str = "256-opt"
    staging_units: int = 4
    filters_per_group: int = 4
    instances: int = 1
    clock_mhz: float = 150.0
    fifo_depth: int = 4
    pipeline_fill: int = DEFAULT_PIPELINE_FILL

    def __post_init__(self):
        if self.instances not in (1, 2):
            raise ValueError("instances must be 1 or 2")
        if self.staging_units < 1 or self.filters_per_group < 1:
            raise ValueError("bad engine geometry")
        if self.fifo_depth < 1 or self.pipeline_fill < 0:
            raise ValueError("bad engine parameters")

    @property
    def macs_per_cycle(self) -> int:
        return self.staging_units * self.filters_per_group * TILE_VALUES * self.instances


ENGINE_PRESETS = {
    "16-unopt": EngineConfig("16-unopt", 1, 1, 1, 55.0),
    "256-unopt": EngineConfig("256-unopt", 4, 4, 1, 55.0),
    "256-opt": EngineConfig("256-opt", 4, 4, 1, 150.0),
    "512-opt": EngineConfig("512-opt", 4, 4, 2, 120.0),
}
assert ENGINE_PRESETS["16-unopt"].macs_per_cycle == 16
assert ENGINE_PRESETS["256-unopt"].macs_per_cycle == 256
assert ENGINE_PRESETS["256-opt"].macs_per_cycle == 256
assert ENGINE_PRESETS["512-opt"].macs_per_cycle == 512


def preset(name: str, **overrides) -> EngineConfig:
    if name not in ENGINE_PRESETS:
        raise ValueError(f"unknown variant {name!r}; have {sorted(ENGINE_PRESETS)}")
    return replace(ENGINE_PRESETS[name], **overrides)


def steer(weight_offset: int, block: np.ndarray) -> np.ndarray:
    """The 4x4 input region a weight at the given intra-tile offset multiplies."""
    if not 0 <= weight_offset < TILE_VALUES:
        raise EngineFault(f"weight offset {weight_offset} out of range")
    i, j = weight_offset // TILE, weight_offset % TILE
    return block[i : i + TILE, j : j + TILE]


# ---------------------------------------------------------------------------
# Cycle accounting
# ---------------------------------------------------------------------------

@dataclass
class LayerCycles:
    name: str
    kind: str
    dense_macs: int = 0
    executed_macs: int = 0
    skipped_macs: int = 0
    stripe_overhead_macs: int = 0
    conv_cycles: int = 0
    unpack_cycles: int = 0  # unpack time not hidden beneath compute
    padpool_cycles: int = 0
    fill_cycles: int = 0
    stripes: int = 0
    instructions: int = 0
    stall_cycles: int = 0

    @property
    def total_cycles(self) -> int:
        return self.conv_cycles + self.unpack_cycles + self.padpool_cycles + self.fill_cycles


@dataclass
class CycleReport:
    variant: str
    rows: list[LayerCycles] = field(default_factory=list)

    def row(self, name: str) -> LayerCycles:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def conv_rows(self) -> list[LayerCycles]:
        return [r for r in self.rows if r.kind == "conv"]

    @property
    def total_cycles(self) -> int:
        return sum(r.total_cycles for r in self.rows)


def _group_cycles(lp: ConvLayerProgram, cfg: EngineConfig) -> np.ndarray:
    """(filter_groups, channels) cycles to stream one weight-tile group."""
    fg = lp.filter_groups
    g = lp.nnz.reshape(fg, 4, lp.c_in).astype(np.int64)
    if cfg.filters_per_group >= 4:
        return np.maximum(GROUP_CYCLE_FLOOR, g.max(axis=1))
    # One filter at a time (16-unopt): filters stream back to back at their
    # own pace, no grouping bubbles; padded filter slots are not real work.
    per_f = np.maximum(GROUP_CYCLE_FLOOR, lp.nnz.astype(np.int64))
    per_f[lp.c_out :] = 0
    return per_f.reshape(fg, 4, lp.c_in).sum(axis=1)


def _instr_compute(lp: ConvLayerProgram, cfg: EngineConfig) -> np.ndarray:
    """(filter_groups,) barrier-synchronized compute cycles per instruction."""
    gc = _group_cycles(lp, cfg)
    units = cfg.staging_units
    sums = np.stack([gc[:, u::units].sum(axis=1) for u in range(units)], axis=1)
    return sums.max(axis=1)


def _unpack_entries_per_unit(lp: ConvLayerProgram, cfg: EngineConfig) -> int:
    """Largest per-unit packed entry count, charged once per stripe."""
    per_channel = lp.nnz.sum(axis=0).astype(np.int64)
    units = cfg.staging_units
    return int(max(per_channel[u::units].sum() for u in range(units)))


@dataclass
class _ConvCost:
    per_fg: np.ndarray  # compute cycles per instruction, by filter group
    unpack_per_stripe: int
    # per instance sums
    conv: list[int]
    fill: list[int]
    unpack: list[int]
    instructions: list[int]

    def critical_instance(self) -> int:
        totals = [c + f + u for c, f, u in zip(self.conv, self.fill, self.unpack)]
        return int(np.argmax(totals))


def _conv_cost(lp: ConvLayerProgram, cfg: EngineConfig) -> _ConvCost:
    per_fg = _instr_compute(lp, cfg)
    per_coord = int(per_fg.sum())
    instr_per_coord = lp.filter_groups
    unpack_per_stripe = _unpack_entries_per_unit(lp, cfg)
    conv = [0] * cfg.instances
    fill = [0] * cfg.instances
    unpack = [0] * cfg.instances
    instructions = [0] * cfg.instances
    for band, inst in zip(lp.plan.bands, lp.stripe_instances):
        coords = band.ofm_rows * lp.tc_out
        stripe_conv = coords * per_coord
        conv[inst] += stripe_conv
        fill[inst] += coords * instr_per_coord * cfg.pipeline_fill
        unpack[inst] += max(0, unpack_per_stripe - stripe_conv)
        instructions[inst] += coords * instr_per_coord
    return _ConvCost(per_fg, unpack_per_stripe, conv, fill, unpack, instructions)


def _conv_row(lp: ConvLayerProgram, cfg: EngineConfig) -> LayerCycles:
    cost = _conv_cost(lp, cfg)
    ci = cost.critical_instance()
    executed = lp.executed_macs
    return LayerCycles(
        name=lp.name,
        kind="conv",
        dense_macs=lp.dense_macs,
        executed_macs=executed,
        skipped_macs=lp.dense_macs - executed,
        stripe_overhead_macs=lp.plan.overhead_macs,
        conv_cycles=cost.conv[ci],
        unpack_cycles=cost.unpack[ci],
        fill_cycles=cost.fill[ci],
        stripes=lp.plan.num_stripes,
        instructions=sum(cost.instructions),
    )


def _padpool_row(lp: PadPoolLayerProgram, cfg: EngineConfig) -> LayerCycles:
    per_inst = [
        _ceil_div(n, 4) + (cfg.pipeline_fill if n else 0) for n in lp.instr_counts
    ]
    ci = int(np.argmax(per_inst))
    n = lp.instr_counts[ci]
    return LayerCycles(
        name=lp.name,
        kind=lp.kind,
        padpool_cycles=_ceil_div(n, 4),
        fill_cycles=cfg.pipeline_fill if n else 0,
        instructions=sum(lp.instr_counts),
    )


def estimate_program(prog: Program, cfg: EngineConfig) -> CycleReport:
    """Analytic cycle report; no instruction materialization needed."""
    _check_cfg(prog, cfg)
    report = CycleReport(cfg.variant)
    for lp in prog.layers:
        if isinstance(lp, ConvLayerProgram):
            report.rows.append(_conv_row(lp, cfg))
        elif isinstance(lp, PadPoolLayerProgram):
            report.rows.append(_padpool_row(lp, cfg))
        else:
            report.rows.append(LayerCycles(lp.name, lp.kind))
    return report


def _check_cfg(prog: Program, cfg: EngineConfig) -> None:
    if prog.instances != cfg.instances:
        raise EngineFault(
            f"program compiled for {prog.instances} instance(s), config has {cfg.instances}"
        )
    if prog.staging_units != cfg.staging_units:
        raise EngineFault("program/config staging unit mismatch")
    if prog.filters_per_group != cfg.filters_per_group:
        raise EngineFault("program/config filter grouping mismatch")


# ---------------------------------------------------------------------------
# Functional execution
# ---------------------------------------------------------------------------

def _exec_conv_layer(
    lp: ConvLayerProgram, cfg: EngineConfig, ifm: TiledTensor, trace: list | None
) -> tuple[TiledTensor, LayerCycles]:
    if lp.instrs is None or lp.packed is None:
        raise EngineFault(f"{lp.name}: program not materialized for functional execution")
    c_out, h_out, w_out = lp.out_shape
    if ifm.channels != lp.c_in:
        raise EngineFault(f"{lp.name}: input has {ifm.channels} channels, wants {lp.c_in}")
    out = TiledTensor.zeros(c_out, h_out, w_out)
    cost = _conv_cost(lp, cfg)
    bias = np.zeros((4,), dtype=np.int64)
    writeback = BoundedFifo(cfg.fifo_depth, name=f"{lp.name}.writeback")

    for inst in range(cfg.instances):
        last_coord = None
        views = None
        for instr in lp.instrs[inst]:
            if (instr.ty, instr.tx) != last_coord:
                last_coord = (instr.ty, instr.tx)
                views = []
                for c in range(lp.c_in):
                    block = read_block_2x2(ifm, c, instr.tx, instr.ty).astype(np.int64)
                    views.append(np.lib.stride_tricks.sliding_window_view(block, (TILE, TILE)))
            fg = instr.filter_group
            bias[:] = 0
            real = min(4, c_out - 4 * fg)
            bias[:real] = lp.bias_acc[4 * fg : 4 * fg + real]
            acc = np.repeat(bias, TILE_VALUES).reshape(4, TILE, TILE).copy()
            for c in range(lp.c_in):
                group = lp.packed.group(fg, c)
                view = views[c]
                for s, tile in enumerate(group.tiles):
                    if not tile.entries:
                        continue
                    offs = np.fromiter((e.offset for e in tile.entries), dtype=np.int64)
                    ws = np.fromiter((e.weight for e in tile.entries), dtype=np.int64)
                    regions = view[offs // TILE, offs % TILE]
                    acc[s] += np.einsum("e,exy->xy", ws, regions)
            qtiles = requantize_array(acc, lp.quant)
            writeback.push((instr, qtiles))
            # the write-to-memory unit drains in FIFO order
            while len(writeback):
                done_instr, done_tiles = writeback.pop()
                dfg = done_instr.filter_group
                for s in range(min(4, c_out - 4 * dfg)):
                    out.set_tile(4 * dfg + s, done_instr.tx, done_instr.ty, done_tiles[s])
            if trace is not None:
                cycles = int(cost.per_fg[fg]) + cfg.pipeline_fill
                trace.append(
                    f"CONV {lp.name} inst={inst} stripe={instr.stripe} ty={instr.ty} "
                    f"tx={instr.tx} fg={fg} cycles={cycles} recompute={int(instr.recompute)}"
                )
    return out, _conv_row(lp, cfg)


def _space_tensor(ref, tensors) -> TiledTensor:
    try:
        return tensors[ref.space]
    except KeyError:
        raise EngineFault(f"no tensor space {ref.space!r} for {ref}") from None


def exec_padpool(instr: PadPoolInstr, tensors: dict[str, TiledTensor]) -> None:
    """Apply one pad/pool instruction: masked maxes, selective replacement."""
    src = _space_tensor(instr.src, tensors)
    dst = _space_tensor(instr.dst, tensors)
    vals = src.get_tile(instr.src.channel, instr.src.tx, instr.src.ty).reshape(-1)
    maxes = [None] * 4
    for k, mask in enumerate(instr.masks):
        if mask:
            picked = [int(vals[p]) for p in range(TILE_VALUES) if mask >> p & 1]
            maxes[k] = max(picked)
    tile = dst.get_tile(instr.dst.channel, instr.dst.tx, instr.dst.ty).copy()
    flat = tile.reshape(-1)
    for p, sel in enumerate(instr.selectors):
        if sel < 0:
            continue
        if maxes[sel] is None:
            raise EngineFault(f"selector {sel} references empty mask in {instr}")
        flat[p] = maxes[sel]
    dst.set_tile(instr.dst.channel, instr.dst.tx, instr.dst.ty, tile)


def _exec_padpool_layer(
    lp: PadPoolLayerProgram, cfg: EngineConfig, ifm: TiledTensor, trace: list | None
) -> tuple[TiledTensor, LayerCycles]:
    if lp.instrs is None:
        raise EngineFault(f"{lp.name}: program not materialized for functional execution")
    c, h_out, w_out = lp.out_shape
    out = TiledTensor.zeros(c, h_out, w_out)
    scratch = TiledTensor.zeros(c, TILE, TILE * max(1, lp.scratch_tiles))
    tensors = {"in": ifm, "out": out, "scratch": scratch}
    for inst in range(cfg.instances):
        for instr in lp.instrs[inst]:
            exec_padpool(instr, tensors)
        if trace is not None and lp.instr_counts[inst]:
            trace.append(
                f"PADPOOL {lp.name} inst={inst} instrs={lp.instr_counts[inst]} "
                f"cycles={_ceil_div(lp.instr_counts[inst], 4)}"
            )
    return out, _padpool_row(lp, cfg)


def exec_program(
    prog: Program, x: TiledTensor, cfg: EngineConfig, trace: list | None = None
) -> tuple[dict[str, np.ndarray | TiledTensor], CycleReport]:
    """Run a compiled program functionally; returns activations and cycles.

    Spatial activations come back as TiledTensors, host-side (flatten/fc)
    results as integer vectors. Results are bit-exact against the reference
    operators; the cycle report matches :func:`estimate_program` exactly.
    """
    _check_cfg(prog, cfg)
    report = CycleReport(cfg.variant)
    acts: dict[str, np.ndarray | TiledTensor] = {}
    cur: TiledTensor | np.ndarray = x
    for lp in prog.layers:
        if isinstance(lp, ConvLayerProgram):
            cur, row = _exec_conv_layer(lp, cfg, cur, trace)
        elif isinstance(lp, PadPoolLayerProgram):
            cur, row = _exec_padpool_layer(lp, cfg, cur, trace)
        elif isinstance(lp, HostOp):
            if lp.kind == "flatten":
                if not isinstance(cur, TiledTensor):
                    raise EngineFault(f"{lp.name}: flatten expects a spatial tensor")
                cur = untile_tensor(cur)
            else:
                layer = prog.model.layer(lp.name)
                cur = run_fc_host(prog.model, layer, cur)
            row = LayerCycles(lp.name, lp.kind)
            if trace is not None:
                trace.append(f"HOST {lp.name} kind={lp.kind}")
        else:  # pragma: no cover
            raise EngineFault(f"unknown layer program {lp!r}")
        report.rows.append(row)
        acts[lp.name] = cur
    return acts, report
