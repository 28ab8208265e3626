"""Command-line front end for the toolchain and simulator.

Verbs:
    quantize  real-weight model -> sign-magnitude weights (.npz)
    prune     magnitude pruning with a threshold or target sparsity
    pack      quantized model -> packed zero-skip weight file (.zskp)
    compile   model + packed weights -> program dump for inspection
    run       compile + execute/estimate + throughput report (CSV)
    report    re-emit a CSV from a stored cycle report (JSON)
    selftest  randomized engine-vs-oracle equivalence sweep
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import driver, engine, layout, metrics, netmodel, oracle, packer, selftest
from .engine import CycleReport, EngineConfig, LayerCycles


class CliError(RuntimeError):
    pass


def _load_model(path: str) -> netmodel.NetworkModel:
    return netmodel.load_model(path)


def _bank_config(args) -> layout.BankConfig:
    if args.bank_tiles is not None:
        return layout.BankConfig(4, args.bank_tiles)
    return layout.BANK_PRESETS[args.bank_preset]


def _engine_config(args) -> EngineConfig:
    overrides = {}
    if args.clock_mhz is not None:
        overrides["clock_mhz"] = args.clock_mhz
    if args.instances is not None:
        overrides["instances"] = args.instances
    if args.fifo_depth is not None:
        overrides["fifo_depth"] = args.fifo_depth
    if args.pipeline_fill is not None:
        overrides["pipeline_fill"] = args.pipeline_fill
    return engine.preset(args.variant, **overrides)


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--variant",
        choices=sorted(engine.ENGINE_PRESETS),
        default="256-opt",
        help="accelerator variant preset",
    )
    p.add_argument("--clock-mhz", type=float, default=None)
    p.add_argument("--bank-tiles", type=int, default=None, help="tiles per SRAM bank")
    p.add_argument(
        "--bank-preset", choices=sorted(layout.BANK_PRESETS), default="arria10-sx660"
    )
    p.add_argument("--instances", type=int, choices=(1, 2), default=None)
    p.add_argument("--fifo-depth", type=int, default=None)
    p.add_argument("--pipeline-fill", type=int, default=None)


def cmd_quantize(args) -> int:
    m = _load_model(args.model)
    q = netmodel.quantize_network(m)
    netmodel.save_model(q, args.out)
    for l in q.layers:
        if isinstance(l, (netmodel.ConvLayer, netmodel.FullyConnectedLayer)):
            print(f"{l.name}: weight_scale={l.weight_scale:.6g}")
    print(f"quantized model written to {args.out}")
    return 0


def cmd_prune(args) -> int:
    m = _load_model(args.model)
    if (args.threshold is None) == (args.sparsity is None):
        raise CliError("give exactly one of --threshold / --sparsity")
    pruned, report = netmodel.prune_magnitude(
        m, threshold=args.threshold, sparsity=args.sparsity
    )
    netmodel.save_model(pruned, args.out)
    for name, s in report.per_layer.items():
        print(f"{name}: nonzero {s.nonzero}/{s.total} (sparsity {s.sparsity:.3f})")
    print(f"pruned model written to {args.out}")
    return 0


def cmd_pack(args) -> int:
    m = _load_model(getattr(args, "in"))
    packed = packer.pack_network(m)
    blob = packer.serialize_network(packed)
    Path(args.out).write_bytes(blob)
    entries = sum(pl.total_entries for pl in packed.values())
    print(f"packed {len(packed)} conv layers, {entries} entries, {len(blob)} bytes -> {args.out}")
    return 0


def cmd_compile(args) -> int:
    m = _load_model(args.model)
    packed = packer.deserialize_network(Path(args.weights).read_bytes())
    cfg = _engine_config(args)
    prog = driver.compile_program(
        m,
        packed,
        _bank_config(args),
        instances=cfg.instances,
        filters_per_group=cfg.filters_per_group,
        staging_units=cfg.staging_units,
    )
    text = driver.dump_program(prog)
    if args.out:
        Path(args.out).write_text(text)
        print(f"program dump ({len(text.splitlines())} lines) -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _report_to_json(report: CycleReport, cfg: EngineConfig) -> str:
    doc = {
        "variant": report.variant,
        "config": dataclasses.asdict(cfg),
        "rows": [dataclasses.asdict(r) for r in report.rows],
    }
    return json.dumps(doc, indent=1)


def _report_from_json(text: str) -> tuple[CycleReport, EngineConfig]:
    doc = json.loads(text)
    cfg = EngineConfig(**doc["config"])
    report = CycleReport(doc["variant"], [LayerCycles(**r) for r in doc["rows"]])
    return report, cfg


def _trace_from_plan(prog: driver.Program, cfg: EngineConfig) -> list[str]:
    """Per-stripe trace for analytic runs (functional runs trace instructions)."""
    lines = []
    for lp in prog.layers:
        if isinstance(lp, driver.ConvLayerProgram):
            cost = engine._conv_cost(lp, cfg)
            per_coord = int(cost.per_fg.sum())
            for band, inst in zip(lp.plan.bands, lp.stripe_instances):
                coords = band.ofm_rows * lp.tc_out
                conv = coords * per_coord
                lines.append(
                    f"CONVSTRIPE {lp.name} stripe={band.index} inst={inst} "
                    f"rows=[{band.ofm_start},{band.ofm_end}) conv={conv} "
                    f"fill={coords * lp.filter_groups * cfg.pipeline_fill} "
                    f"unpack_excess={max(0, cost.unpack_per_stripe - conv)}"
                )
        elif isinstance(lp, driver.PadPoolLayerProgram):
            for inst, n in enumerate(lp.instr_counts):
                if n:
                    lines.append(f"PADPOOL {lp.name} inst={inst} instrs={n} cycles={-(-n // 4)}")
    return lines


def cmd_run(args) -> int:
    m = _load_model(args.model)
    cfg = _engine_config(args)
    bank = _bank_config(args)

    has_weights = all(
        m.weights.get(l.name) is not None for l in m.conv_layers()
    ) and bool(m.conv_layers())
    synthetic = args.synthetic_sparsity is not None or args.synthetic_max_nnz is not None
    mode = args.mode
    if mode == "auto":
        mode = "functional" if (has_weights and not synthetic) else "analytic"
    if mode == "functional" and (synthetic or not has_weights):
        raise CliError("functional mode needs real weights and no synthetic sparsity")

    trace_lines: list[str] | None = [] if args.trace else None
    if mode == "analytic":
        nnz = metrics.synthetic_nnz(
            m,
            sparsity=args.synthetic_sparsity or 0.0,
            max_nnz=args.synthetic_max_nnz,
            seed=args.seed,
        )
        prog = driver.compile_program(
            m,
            None,
            bank,
            instances=cfg.instances,
            filters_per_group=cfg.filters_per_group,
            staging_units=cfg.staging_units,
            nnz=nnz,
            materialize=False,
        )
        report = engine.estimate_program(prog, cfg)
        if trace_lines is not None:
            trace_lines.extend(_trace_from_plan(prog, cfg))
    else:
        if not m.is_quantized(m.conv_layers()[0].name):
            m = netmodel.quantize_network(m)
        packed = packer.pack_network(m)
        prog = driver.compile_program(
            m,
            packed,
            bank,
            instances=cfg.instances,
            filters_per_group=cfg.filters_per_group,
            staging_units=cfg.staging_units,
        )
        if args.image:
            tiled = netmodel.ingest_image(args.image, m)
        else:
            c, h, w = m.input_shape
            rng = np.random.default_rng(args.seed)
            tiled = layout.tile_tensor(
                rng.integers(-127, 128, size=c * h * w, dtype=np.int16), c, w, h
            )
        _, report = engine.exec_program(prog, tiled, cfg, trace=trace_lines)

    tp = metrics.build_report(report, cfg)
    csv = metrics.write_csv(tp)
    if args.csv:
        Path(args.csv).write_text(csv)
    else:
        sys.stdout.write(csv)
    if args.trace:
        Path(args.trace).write_text("\n".join(trace_lines or []) + "\n")
    if args.cycles_out:
        Path(args.cycles_out).write_text(_report_to_json(report, cfg))
    if tp.best is not None:
        print(
            f"mean gops={tp.mean_gops:.2f} effective={tp.mean_effective_gops:.2f} | "
            f"best {tp.best.name} effective={tp.best.effective_gops:.2f} | "
            f"worst {tp.worst.name} effective={tp.worst.effective_gops:.2f}",
            file=sys.stderr,
        )
    return 0


def cmd_report(args) -> int:
    report, cfg = _report_from_json(Path(args.cycles).read_text())
    csv = metrics.write_csv(metrics.build_report(report, cfg))
    if args.csv:
        Path(args.csv).write_text(csv)
    else:
        sys.stdout.write(csv)
    return 0


def cmd_selftest(args) -> int:
    ok = selftest.run_selftest(args.trials, args.seed, verbose=args.verbose)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="zskp",
        description="Tiled zero-weight-skipping CNN accelerator simulator and toolchain",
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize real weights to sign-magnitude")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_quantize)

    pr = sub.add_parser("prune", help="magnitude-prune real weights")
    pr.add_argument("--model", required=True)
    pr.add_argument("--threshold", type=float, default=None)
    pr.add_argument("--sparsity", type=float, default=None)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_prune)

    pk = sub.add_parser("pack", help="pack quantized weights into the zero-skip format")
    pk.add_argument("--in", required=True)
    pk.add_argument("--out", required=True)
    pk.set_defaults(fn=cmd_pack)

    cp = sub.add_parser("compile", help="compile and dump the instruction stream")
    cp.add_argument("--model", required=True)
    cp.add_argument("--weights", required=True)
    cp.add_argument("--out", default=None)
    _add_engine_flags(cp)
    cp.set_defaults(fn=cmd_compile)

    rn = sub.add_parser("run", help="compile, execute or estimate, and report")
    rn.add_argument("--model", required=True)
    rn.add_argument("--image", default=None, help="raw float32 input image")
    rn.add_argument("--csv", default=None, help="write the report CSV here")
    rn.add_argument("--trace", default=None, help="write a cycle trace here")
    rn.add_argument("--cycles-out", default=None, help="store the raw cycle report (JSON)")
    rn.add_argument("--seed", type=int, default=0)
    rn.add_argument("--synthetic-sparsity", type=float, default=None)
    rn.add_argument("--synthetic-max-nnz", type=int, default=None)
    rn.add_argument("--mode", choices=("auto", "functional", "analytic"), default="auto")
    _add_engine_flags(rn)
    rn.set_defaults(fn=cmd_run)

    rp = sub.add_parser("report", help="re-emit a CSV from a stored cycle report")
    rp.add_argument("--cycles", required=True)
    rp.add_argument("--csv", default=None)
    rp.set_defaults(fn=cmd_report)

    st = sub.add_parser("selftest", help="randomized engine-vs-oracle sweep")
    st.add_argument("--trials", type=int, default=50)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--verbose", action="store_true")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (
        CliError,
        driver.PlanningError,
        driver.CompileError,
        engine.EngineFault,
        layout.LayoutError,
        netmodel.ModelError,
        packer.PackError,
        packer.FormatError,
        oracle.OracleError,
        ValueError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
