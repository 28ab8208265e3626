"""Throughput metrics: ideal cycles, efficiency, GOPS, CSV report emission.

Operations count as 2 per MAC (multiply + add). Ideal cycles for a layer are
its dense MACs plus the striping recompute MACs, divided by the variant's
peak MACs per cycle; efficiency is ideal over measured cycles and can exceed
1.0 only when zero-skipping removed work. "Effective" GOPS counts skipped
MACs as if performed (dense ops over elapsed time); plain GOPS counts only
executed ops.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import netmodel, packer
from .engine import CycleReport, EngineConfig, LayerCycles

OPS_PER_MAC = 2

CSV_COLUMNS = [
    "layer",
    "dense_macs",
    "executed_macs",
    "skipped_macs",
    "stripe_overhead_macs",
    "conv_cycles",
    "unpack_cycles",
    "padpool_cycles",
    "fill_cycles",
    "total_cycles",
    "gops",
    "effective_gops",
    "efficiency",
]


def ideal_cycles(dense_macs: int, overhead_macs: int, macs_per_cycle: int) -> int:
    """Theoretical minimum cycles: dense plus striping MACs at peak rate."""
    return -(-(dense_macs + overhead_macs) // macs_per_cycle)


@dataclass
class LayerThroughput:
    name: str
    kind: str
    cycles: LayerCycles
    gops: float
    effective_gops: float
    efficiency: float
    ideal: int


@dataclass
class ThroughputReport:
    config: EngineConfig
    rows: list[LayerThroughput] = field(default_factory=list)
    best: LayerThroughput | None = None
    worst: LayerThroughput | None = None
    mean_gops: float = 0.0
    mean_effective_gops: float = 0.0
    mean_efficiency: float = 0.0

    def row(self, name: str) -> LayerThroughput:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def conv_rows(self) -> list[LayerThroughput]:
        return [r for r in self.rows if r.kind == "conv"]


def build_report(cycles: CycleReport, cfg: EngineConfig) -> ThroughputReport:
    """Per-layer throughput with best/worst/mean markers over conv layers."""
    clock = cfg.clock_mhz * 1e6
    report = ThroughputReport(cfg)
    for r in cycles.rows:
        total = r.total_cycles
        seconds = total / clock if total else 0.0
        gops = OPS_PER_MAC * r.executed_macs / seconds / 1e9 if total else 0.0
        eff_gops = OPS_PER_MAC * r.dense_macs / seconds / 1e9 if total else 0.0
        ideal = ideal_cycles(r.dense_macs, r.stripe_overhead_macs, cfg.macs_per_cycle)
        efficiency = ideal / total if total else 0.0
        report.rows.append(
            LayerThroughput(r.name, r.kind, r, gops, eff_gops, efficiency, ideal)
        )
    conv = report.conv_rows()
    if conv:
        report.best = max(conv, key=lambda r: r.effective_gops)
        report.worst = min(conv, key=lambda r: r.effective_gops)
        report.mean_gops = float(np.mean([r.gops for r in conv]))
        report.mean_effective_gops = float(np.mean([r.effective_gops for r in conv]))
        report.mean_efficiency = float(np.mean([r.efficiency for r in conv]))
    return report


def _csv_row(name: str, c: LayerCycles, gops: float, eff_gops: float, efficiency: float) -> str:
    return ",".join(
        [
            name,
            str(c.dense_macs),
            str(c.executed_macs),
            str(c.skipped_macs),
            str(c.stripe_overhead_macs),
            str(c.conv_cycles),
            str(c.unpack_cycles),
            str(c.padpool_cycles),
            str(c.fill_cycles),
            str(c.total_cycles),
            f"{gops:.4f}",
            f"{eff_gops:.4f}",
            f"{efficiency:.6f}",
        ]
    )


def write_csv(report: ThroughputReport) -> str:
    """Deterministic CSV: per-layer rows, then TOTAL and conv-layer markers."""
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for r in report.rows:
        out.write(_csv_row(r.name, r.cycles, r.gops, r.effective_gops, r.efficiency) + "\n")

    total = LayerCycles("TOTAL", "total")
    for r in report.rows:
        total.dense_macs += r.cycles.dense_macs
        total.executed_macs += r.cycles.executed_macs
        total.skipped_macs += r.cycles.skipped_macs
        total.stripe_overhead_macs += r.cycles.stripe_overhead_macs
        total.conv_cycles += r.cycles.conv_cycles
        total.unpack_cycles += r.cycles.unpack_cycles
        total.padpool_cycles += r.cycles.padpool_cycles
        total.fill_cycles += r.cycles.fill_cycles
    clock = report.config.clock_mhz * 1e6
    seconds = total.total_cycles / clock if total.total_cycles else 0.0
    tg = OPS_PER_MAC * total.executed_macs / seconds / 1e9 if seconds else 0.0
    te = OPS_PER_MAC * total.dense_macs / seconds / 1e9 if seconds else 0.0
    t_ideal = ideal_cycles(
        total.dense_macs, total.stripe_overhead_macs, report.config.macs_per_cycle
    )
    t_eff = t_ideal / total.total_cycles if total.total_cycles else 0.0
    out.write(_csv_row("TOTAL", total, tg, te, t_eff) + "\n")

    if report.best is not None:
        out.write(
            f"MEAN,,,,,,,,,,{report.mean_gops:.4f},{report.mean_effective_gops:.4f},"
            f"{report.mean_efficiency:.6f}\n"
        )
        for tag, r in (("BEST", report.best), ("WORST", report.worst)):
            out.write(
                f"{tag}:{r.name},,,,,,,,,,{r.gops:.4f},{r.effective_gops:.4f},"
                f"{r.efficiency:.6f}\n"
            )
    return out.getvalue()


# ---------------------------------------------------------------------------
# Synthetic sparsity for geometry-only cycle studies
# ---------------------------------------------------------------------------

def synthetic_nnz(
    m: netmodel.NetworkModel,
    sparsity: float = 0.0,
    max_nnz: int | None = None,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Per-layer nonzero-count matrices drawn without materializing weights.

    Each weight tile's nonzero pattern is independent Bernoulli per offset
    within the k x k support (so counts are Binomial(k*k, 1 - sparsity)),
    optionally capped at ``max_nnz`` per tile. Deterministic in the seed.
    """
    if not 0.0 <= sparsity < 1.0 or (max_nnz is not None and max_nnz < 0):
        raise ValueError(f"bad synthetic sparsity parameters ({sparsity}, {max_nnz})")
    rng = np.random.default_rng(seed)
    out = {}
    for l in m.layers:
        if not isinstance(l, netmodel.ConvLayer):
            continue
        k2 = l.kernel * l.kernel
        shape = (l.out_channels, l.in_channels)
        if sparsity == 0.0:
            nnz = np.full(shape, k2, dtype=np.int16)
        else:
            nnz = rng.binomial(k2, 1.0 - sparsity, size=shape).astype(np.int16)
        if max_nnz is not None:
            nnz = np.minimum(nnz, max_nnz)
        padded = np.zeros((packer.padded_filters(l.out_channels), l.in_channels), dtype=np.int16)
        padded[: l.out_channels] = nnz
        out[l.name] = padded
    return out
