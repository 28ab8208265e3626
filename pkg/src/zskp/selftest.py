"""Randomized engine-vs-oracle equivalence sweep.

Generates small random networks (conv chains with padding and 2x2/2 pooling
interleaved, random pruning, random quantization), runs them both through
the functional engine and through the reference operators, and demands exact
integer equality layer by layer. Also cross-checks that the functional and
analytic cycle reports agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import driver, engine, layout, netmodel, oracle, packer


@dataclass
class TrialResult:
    ok: bool
    seed: int
    description: str
    mismatches: list[str] = field(default_factory=list)


def random_toy_model(rng: np.random.Generator, max_convs: int = 3) -> netmodel.NetworkModel:
    """A quantized random network: channels <= 8, feature maps <= 16x16."""
    c = int(rng.integers(1, 5))
    h = int(rng.integers(6, 17))
    w = int(rng.integers(6, 17))
    input_shape = (c, h, w)
    layers: list = []
    weights: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    n_convs = int(rng.integers(1, max_convs + 1))
    for i in range(n_convs):
        if rng.random() < 0.5:
            layers.append(netmodel.PadLayer(f"pad{i}", 1))
            h, w = h + 2, w + 2
        k = int(rng.integers(1, min(3, h, w) + 1))
        c_out = int(rng.integers(1, 9))
        name = f"conv{i}"
        layers.append(
            netmodel.ConvLayer(
                name,
                c,
                c_out,
                k,
                act_shift=int(rng.integers(2, 8)),
                relu=bool(rng.random() < 0.7),
            )
        )
        wgt = rng.normal(0.0, 1.0, size=(c_out, c, k, k)).astype(np.float32)
        prune = float(rng.uniform(0.0, 0.9))
        if prune > 0:
            cut = np.quantile(np.abs(wgt), prune)
            wgt = np.where(np.abs(wgt) < cut, np.float32(0.0), wgt)
        if not np.any(wgt):
            wgt.reshape(-1)[0] = np.float32(1.0)
        weights[name] = wgt
        if rng.random() < 0.5:
            biases[name] = rng.normal(0.0, 0.5, size=c_out).astype(np.float32)
        c, h, w = c_out, h - k + 1, w - k + 1
        if rng.random() < 0.4 and h >= 2 and w >= 2:
            layers.append(netmodel.MaxPoolLayer(f"pool{i}", (2, 2), (2, 2)))
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    m = netmodel.NetworkModel(input_shape, layers, weights, biases, input_scale=32.0)
    return netmodel.quantize_network(m)


def _min_capacity(m: netmodel.NetworkModel) -> int:
    """Total tiles needed so every conv layer can stripe at height 1."""
    worst = 1
    for name, (ins, outs) in m.in_out_shapes().items():
        if not isinstance(m.layer(name), netmodel.ConvLayer):
            continue
        ci, hi, wi = ins
        co, ho, wo = outs
        a = ci * -(-wi // 4)
        b = co * -(-wo // 4)
        worst = max(worst, 3 * a + 2 * b)
    return worst


def random_engine_setup(rng: np.random.Generator, m: netmodel.NetworkModel):
    """Random bank capacity (sometimes forcing striping) and engine config."""
    factor = float(rng.choice([1.0, 1.5, 3.0, 100.0]))
    total = int(_min_capacity(m) * factor) + 1
    bank = layout.BankConfig(4, -(-total // 4))
    if rng.random() < 0.25:
        cfg = engine.preset("16-unopt", pipeline_fill=int(rng.integers(0, 16)))
    else:
        instances = int(rng.choice([1, 2]))
        cfg = engine.EngineConfig(
            "256-opt",
            4,
            4,
            instances,
            150.0,
            fifo_depth=int(rng.integers(1, 5)),
            pipeline_fill=int(rng.integers(0, 16)),
        )
    return bank, cfg


def run_trial(seed: int) -> TrialResult:
    rng = np.random.default_rng(seed)
    m = random_toy_model(rng)
    bank, cfg = random_engine_setup(rng, m)
    desc = (
        f"{len(m.conv_layers())} convs, input {m.input_shape}, "
        f"variant {cfg.variant} x{cfg.instances}"
    )
    image = rng.integers(-127, 128, size=m.input_shape, dtype=np.int16)
    packed = packer.pack_network(m)
    prog = driver.compile_program(
        m,
        packed,
        bank,
        instances=cfg.instances,
        filters_per_group=cfg.filters_per_group,
        staging_units=cfg.staging_units,
    )
    tiled = layout.tile_tensor(image.reshape(-1), *_cwh(m.input_shape))
    acts, report = engine.exec_program(prog, tiled, cfg)
    ref = oracle.infer_ref(m, image)

    mismatches = []
    for l in m.layers:
        got = acts[l.name]
        want = ref[l.name]
        if isinstance(got, layout.TiledTensor):
            got_flat = layout.untile_tensor(got)
            if not np.array_equal(got_flat, want.reshape(-1)):
                mismatches.append(f"{l.name}: engine != oracle")
        elif not np.array_equal(np.asarray(got), np.asarray(want)):
            mismatches.append(f"{l.name}: engine != oracle")

    est = engine.estimate_program(prog, cfg)
    for fr, ar in zip(report.rows, est.rows):
        if fr.total_cycles != ar.total_cycles or fr.conv_cycles != ar.conv_cycles:
            mismatches.append(
                f"{fr.name}: functional cycles {fr.total_cycles} != analytic {ar.total_cycles}"
            )
    return TrialResult(not mismatches, seed, desc, mismatches)


def _cwh(shape):
    c, h, w = shape
    return c, w, h


def run_selftest(trials: int = 50, seed: int = 0, verbose: bool = False) -> bool:
    """Run the sweep; prints one line per failure and a final summary."""
    failures = 0
    for i in range(trials):
        r = run_trial(seed + i)
        if verbose:
            print(f"trial {i:3d} seed={r.seed} {'ok ' if r.ok else 'FAIL'} {r.description}")
        if not r.ok:
            failures += 1
            for msg in r.mismatches:
                print(f"trial {i} (seed {r.seed}): {msg}")
    print(f"selftest: {trials - failures}/{trials} trials passed")
    return failures == 0
