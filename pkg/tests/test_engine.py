"""Engine: steering, zero-skip cycle model, oracle equivalence, determinism."""

import numpy as np
import pytest

from zskp import driver, engine, layout, netmodel, oracle, packer
from zskp.engine import (
    ENGINE_PRESETS,
    EngineConfig,
    EngineFault,
    estimate_program,
    exec_program,
    preset,
    steer,
)
from zskp.layout import BankConfig
from zskp.selftest import random_toy_model, run_trial


def cfg256(fill=12, instances=1, **kw):
    return EngineConfig("256-opt", 4, 4, instances, 150.0, pipeline_fill=fill, **kw)


def build(m, bank=None, instances=1, cfg=None):
    cfg = cfg or cfg256(instances=instances)
    return driver.compile_program(
        m,
        packer.pack_network(m),
        bank or BankConfig(4, 10000),
        instances=cfg.instances,
        filters_per_group=cfg.filters_per_group,
        staging_units=cfg.staging_units,
    )


def conv_model(weights_q, h, w, act_shift=0, relu=False, name="c"):
    """Model with explicit integer weights (scale 1)."""
    f, c, k, _ = weights_q.shape
    m = netmodel.NetworkModel(
        (c, h, w),
        [netmodel.ConvLayer(name, c, f, k, act_shift=act_shift, relu=relu, weight_scale=1.0)],
        {name: weights_q.astype(np.int16)},
    )
    return m


def run_on(m, img, cfg, bank=None):
    prog = build(m, bank, cfg=cfg)
    c, h, w = m.input_shape
    tiled = layout.tile_tensor(img.reshape(-1), c, w, h)
    return exec_program(prog, tiled, cfg)


class TestSteer:
    def block(self):
        # tiles A, B, C, D numbered 0..15, 16..31, 32..47, 48..63
        b = np.zeros((8, 8), dtype=np.int64)
        b[0:4, 0:4] = np.arange(16).reshape(4, 4)
        b[0:4, 4:8] = np.arange(16).reshape(4, 4) + 16
        b[4:8, 0:4] = np.arange(16).reshape(4, 4) + 32
        b[4:8, 4:8] = np.arange(16).reshape(4, 4) + 48
        return b

    def test_offset_zero_is_tile_a(self):
        got = steer(0, self.block())
        assert np.array_equal(got, np.arange(16).reshape(4, 4))

    def test_offset_five(self):
        got = steer(5, self.block())
        assert list(got[0]) == [5, 6, 7, 16 + 4]  # A_5, A_6, A_7, B_4
        assert got[3, 3] == 48  # D_0 at the last element

    def test_offset_fifteen(self):
        got = steer(15, self.block())
        assert np.array_equal(got, self.block()[3:7, 3:7])

    def test_bad_offset(self):
        with pytest.raises(EngineFault):
            steer(16, self.block())


class TestPresets:
    def test_macs_per_cycle(self):
        assert ENGINE_PRESETS["16-unopt"].macs_per_cycle == 16
        assert ENGINE_PRESETS["256-unopt"].macs_per_cycle == 256
        assert ENGINE_PRESETS["512-opt"].macs_per_cycle == 512

    def test_clocks(self):
        assert ENGINE_PRESETS["16-unopt"].clock_mhz == 55.0
        assert ENGINE_PRESETS["256-unopt"].clock_mhz == 55.0
        assert ENGINE_PRESETS["256-opt"].clock_mhz == 150.0
        assert ENGINE_PRESETS["512-opt"].clock_mhz == 120.0

    def test_override(self):
        c = preset("512-opt", pipeline_fill=7)
        assert c.pipeline_fill == 7 and c.instances == 2

    def test_unknown(self):
        with pytest.raises(ValueError):
            preset("1024-opt")


class TestConvCycles:
    def test_delta_kernel_floor_plus_fill(self, rng):
        w = np.zeros((1, 1, 3, 3), dtype=np.int16)
        w[0, 0, 0, 0] = 1
        m = conv_model(w, 6, 6)
        img = rng.integers(-100, 101, size=(1, 6, 6)).astype(np.int16)
        cfg = cfg256(fill=12)
        acts, rep = run_on(m, img, cfg)
        row = rep.row("c")
        # one tile coordinate, one group: max(4, 1) + fill
        assert row.conv_cycles == 4
        assert row.fill_cycles == 12
        # functional check: delta kernel copies the input
        got = layout.untile_tensor(acts["c"])
        assert np.array_equal(got, img[:, :4, :4].reshape(-1))

    def test_dense_3x3_costs_nine(self, rng):
        w = rng.integers(1, 30, size=(4, 1, 3, 3)).astype(np.int16)
        m = conv_model(w, 6, 6, act_shift=6)
        _, rep = run_on(m, rng.integers(-50, 51, (1, 6, 6)).astype(np.int16), cfg256(fill=12))
        assert rep.row("c").conv_cycles == 9

    def test_group_bubbles_cost_max(self):
        # four filters with 9, 2, 5, 1 nonzeros in one channel tile
        w = np.zeros((4, 1, 3, 3), dtype=np.int16)
        w[0] = 1
        w[1].reshape(-1)[:2] = 1
        w[2].reshape(-1)[:5] = 1
        w[3].reshape(-1)[:1] = 1
        m = conv_model(w, 6, 6)
        _, rep = run_on(m, np.zeros((1, 6, 6), np.int16), cfg256(fill=0))
        assert rep.row("c").conv_cycles == 9

    def test_all_zero_group_still_costs_floor(self):
        w = np.zeros((4, 1, 3, 3), dtype=np.int16)
        w[0, 0, 0, 0] = 1  # keep quantization valid; channel 0 group nnz=1
        m = conv_model(w, 6, 6)
        prog = build(m)
        lp = prog.conv_layers()[0]
        gc = engine._group_cycles(lp, cfg256())
        assert gc.min() == 4

    def test_dense_16_costs_16(self, rng):
        w = rng.integers(1, 10, size=(4, 1, 4, 4)).astype(np.int16)
        m = conv_model(w, 8, 8, act_shift=6)
        _, rep = run_on(m, np.zeros((1, 8, 8), np.int16), cfg256(fill=0))
        # 2x2 output tile coords on the 5x5 output
        assert rep.row("c").conv_cycles == 16 * 4

    def test_units_sum_their_channels(self, rng):
        # 8 channels over 4 units: 2 channels each, dense 3x3 -> 18 per instr
        w = rng.integers(1, 20, size=(4, 8, 3, 3)).astype(np.int16)
        m = conv_model(w, 6, 6, act_shift=8)
        _, rep = run_on(m, np.zeros((8, 6, 6), np.int16), cfg256(fill=0))
        assert rep.row("c").conv_cycles == 18

    def test_channel_imbalance_barrier(self, rng):
        # 5 channels: unit 0 gets 2, others 1: barrier waits for 2x9
        w = rng.integers(1, 20, size=(4, 5, 3, 3)).astype(np.int16)
        m = conv_model(w, 6, 6, act_shift=8)
        _, rep = run_on(m, np.zeros((5, 6, 6), np.int16), cfg256(fill=0))
        assert rep.row("c").conv_cycles == 18

    def test_sixteen_unopt_serializes_filters(self, rng):
        w = rng.integers(1, 20, size=(4, 1, 3, 3)).astype(np.int16)
        m = conv_model(w, 6, 6, act_shift=8)
        cfg = preset("16-unopt", pipeline_fill=0)
        prog = driver.compile_program(
            m, packer.pack_network(m), BankConfig(4, 10000),
            instances=1, filters_per_group=1, staging_units=1,
        )
        tiled = layout.tile_tensor(np.zeros(36, np.int16), 1, 6, 6)
        _, rep = exec_program(prog, tiled, cfg)
        assert rep.row("c").conv_cycles == 4 * 9  # four filters back to back

    def test_executed_macs_formula(self, rng):
        w = np.where(rng.random((4, 2, 3, 3)) < 0.5, rng.integers(1, 20, (4, 2, 3, 3)), 0).astype(np.int16)
        if not w.any():
            w[0, 0, 0, 0] = 1
        m = conv_model(w, 8, 8, act_shift=6)
        _, rep = run_on(m, rng.integers(-30, 31, (2, 8, 8)).astype(np.int16), cfg256())
        row = rep.row("c")
        h_out = w_out = 6
        assert row.executed_macs == np.count_nonzero(w) * h_out * w_out
        assert row.executed_macs + row.skipped_macs == row.dense_macs

    def test_unpack_excess_when_reuse_is_low(self, rng):
        # single output coordinate, many filters: unpacking dominates compute
        w = rng.integers(1, 20, size=(64, 4, 3, 3)).astype(np.int16)
        m = conv_model(w, 4, 4, act_shift=8)
        img = np.zeros((4, 4, 4), np.int16)
        _, rep = run_on(m, img, cfg256(fill=0))
        row = rep.row("c")
        # per unit: 16 groups x 1 channel x 9 = 144 compute cycles;
        # entries per unit = 64 filters x 9 = 576
        assert row.conv_cycles == 144
        assert row.unpack_cycles == 576 - 144

    def test_unpack_hidden_when_reuse_is_high(self, rng):
        w = rng.integers(1, 20, size=(4, 4, 3, 3)).astype(np.int16)
        m = conv_model(w, 18, 18, act_shift=8)
        _, rep = run_on(m, np.zeros((4, 18, 18), np.int16), cfg256(fill=0))
        assert rep.row("c").unpack_cycles == 0


class TestZeroSkip:
    def test_floor_and_ceiling_exhaustive(self):
        """Cycle reduction never exceeds (16-4)/16 = 75%, exact at nnz<=4."""
        for preset_name in ("256-opt", "16-unopt"):
            for nnz in range(17):
                w = np.zeros((4, 1, 4, 4), dtype=np.int16)
                for f in range(4):
                    w[f].reshape(-1)[:nnz] = 1
                if nnz == 0:
                    w[0, 0, 0, 0] = 0  # keep all-zero: cycles still floor
                cfg = (
                    cfg256(fill=0)
                    if preset_name == "256-opt"
                    else preset("16-unopt", pipeline_fill=0)
                )
                m = netmodel.NetworkModel(
                    (1, 8, 8),
                    [netmodel.ConvLayer("c", 1, 4, 4, act_shift=0, relu=False, weight_scale=1.0)],
                    {"c": w},
                )
                prog = driver.compile_program(
                    m, packer.pack_network(m), BankConfig(4, 10000),
                    instances=1, filters_per_group=cfg.filters_per_group,
                    staging_units=cfg.staging_units,
                )
                rep = estimate_program(prog, cfg)
                per_group = max(4, nnz)
                scale = 4 if preset_name == "16-unopt" else 1
                assert rep.row("c").conv_cycles == 4 * per_group * scale  # 4 coords
                reduction = (16 - per_group) / 16
                assert reduction <= 0.75
                if nnz <= 4:
                    assert reduction == 0.75

    def test_pruned_to_4_speedup_is_9_over_4(self, rng):
        dense = rng.integers(1, 9, size=(8, 8, 3, 3)).astype(np.int16)
        pruned = dense.copy()
        keep = np.zeros((3, 3), dtype=bool)
        keep.reshape(-1)[[0, 2, 4, 8]] = True
        pruned *= keep
        cycles = {}
        for tag, w in (("dense", dense), ("pruned", pruned)):
            m = conv_model(w, 10, 10, act_shift=8)
            _, rep = run_on(m, np.zeros((8, 10, 10), np.int16), cfg256(fill=5))
            cycles[tag] = rep.row("c").conv_cycles
        assert cycles["dense"] / cycles["pruned"] == 9 / 4


class TestOracleEquivalence:
    def test_pad_conv_toy(self, rng):
        m = netmodel.quantize_network(
            netmodel.NetworkModel(
                (2, 6, 6),
                [netmodel.PadLayer("p", 1), netmodel.ConvLayer("c", 2, 3, 3, act_shift=5)],
                {"c": rng.normal(size=(3, 2, 3, 3)).astype(np.float32)},
                {"c": rng.normal(size=3).astype(np.float32)},
                input_scale=16.0,
            )
        )
        img = rng.integers(-127, 128, size=(2, 6, 6)).astype(np.int16)
        acts, _ = run_on(m, img, cfg256())
        ref = oracle.infer_ref(m, img)
        for name in ("p", "c"):
            assert np.array_equal(
                layout.untile_tensor(acts[name]), ref[name].reshape(-1)
            )

    def test_striped_execution_matches(self, rng):
        m = netmodel.quantize_network(
            netmodel.NetworkModel(
                (2, 24, 8),
                [netmodel.ConvLayer("c", 2, 4, 3, act_shift=5)],
                {"c": rng.normal(size=(4, 2, 3, 3)).astype(np.float32)},
            )
        )
        img = rng.integers(-127, 128, size=(2, 24, 8)).astype(np.int16)
        small = BankConfig(4, 12)  # forces several stripes
        for instances in (1, 2):
            cfg = cfg256(instances=instances)
            prog = build(m, small, cfg=cfg)
            assert prog.conv_layers()[0].plan.num_stripes > 1
            tiled = layout.tile_tensor(img.reshape(-1), 2, 8, 24)
            acts, _ = exec_program(prog, tiled, cfg)
            ref = oracle.infer_ref(m, img)
            assert np.array_equal(layout.untile_tensor(acts["c"]), ref["c"].reshape(-1))

    def test_conv_chain_with_ragged_tiles(self, rng):
        # 14-wide feature maps leave in-tile padding; garbage in padding
        # slots must never reach logical values of the next conv
        m = netmodel.quantize_network(
            netmodel.NetworkModel(
                (1, 16, 16),
                [
                    netmodel.ConvLayer("a", 1, 2, 3, act_shift=4),
                    netmodel.ConvLayer("b", 2, 2, 3, act_shift=4),
                ],
                {
                    "a": rng.normal(size=(2, 1, 3, 3)).astype(np.float32),
                    "b": rng.normal(size=(2, 2, 3, 3)).astype(np.float32),
                },
            )
        )
        img = rng.integers(-127, 128, size=(1, 16, 16)).astype(np.int16)
        acts, _ = run_on(m, img, cfg256())
        ref = oracle.infer_ref(m, img)
        for name in ("a", "b"):
            assert np.array_equal(layout.untile_tensor(acts[name]), ref[name].reshape(-1))

    def test_random_trials(self):
        for seed in range(25):
            r = run_trial(seed + 10_000)
            assert r.ok, f"seed {r.seed}: {r.mismatches}"


class TestDeterminismAndOrder:
    def test_two_runs_identical(self, rng):
        m = random_toy_model(np.random.default_rng(7))
        img = np.random.default_rng(8).integers(-127, 128, size=m.input_shape).astype(np.int16)
        cfg = cfg256()
        a1, r1 = run_on(m, img, cfg)
        a2, r2 = run_on(m, img, cfg)
        for k in a1:
            v1, v2 = a1[k], a2[k]
            if isinstance(v1, layout.TiledTensor):
                assert np.array_equal(v1.tiles, v2.tiles)
            else:
                assert np.array_equal(v1, v2)
        assert [r.total_cycles for r in r1.rows] == [r.total_cycles for r in r2.rows]

    def test_shuffled_instruction_order_same_result(self, rng):
        m = netmodel.quantize_network(
            netmodel.NetworkModel(
                (2, 20, 8),
                [netmodel.ConvLayer("c", 2, 8, 3, act_shift=5)],
                {"c": rng.normal(size=(8, 2, 3, 3)).astype(np.float32)},
            )
        )
        img = rng.integers(-127, 128, size=(2, 20, 8)).astype(np.int16)
        cfg = cfg256()
        prog = build(m, BankConfig(4, 30), cfg=cfg)
        tiled = layout.tile_tensor(img.reshape(-1), 2, 8, 20)
        a1, _ = exec_program(prog, tiled, cfg)
        shuffled = [list(per) for per in prog.conv_layers()[0].instrs]
        np.random.default_rng(0).shuffle(shuffled[0])
        prog.conv_layers()[0].instrs = shuffled
        a2, _ = exec_program(prog, tiled, cfg)
        assert np.array_equal(
            layout.untile_tensor(a1["c"]), layout.untile_tensor(a2["c"])
        )

    def test_functional_equals_analytic_cycles(self):
        for seed in (1, 2, 3):
            r = run_trial(20_000 + seed)
            assert r.ok, r.mismatches


class TestMonotonicityAndScaling:
    def test_pruning_never_increases_cycles(self, rng):
        w = rng.normal(size=(8, 4, 3, 3)).astype(np.float32)
        m0 = netmodel.NetworkModel((4, 12, 12), [netmodel.ConvLayer("c", 4, 8, 3, act_shift=5)], {"c": w})
        prev = None
        for frac in (0.0, 0.2, 0.4, 0.6, 0.8):
            pruned, _ = netmodel.prune_magnitude(m0, sparsity=frac)
            q = netmodel.quantize_network(pruned)
            prog = build(q)
            rep = estimate_program(prog, cfg256(fill=6))
            cycles = rep.row("c").total_cycles
            if prev is not None:
                assert cycles <= prev
            prev = cycles

    def test_two_instances_near_half(self, rng):
        m = netmodel.quantize_network(
            netmodel.NetworkModel(
                (4, 64, 8),
                [netmodel.ConvLayer("c", 4, 4, 3, act_shift=5)],
                {"c": rng.uniform(0.5, 1, size=(4, 4, 3, 3)).astype(np.float32)},
            )
        )
        bank = BankConfig(4, 50)
        reps = {}
        for instances in (1, 2):
            cfg = cfg256(instances=instances)
            prog = build(m, bank, cfg=cfg)
            stripes = prog.conv_layers()[0].plan.num_stripes
            reps[instances] = estimate_program(prog, cfg).row("c")
        assert stripes % 2 == 0  # even stripe count for the bound
        one, two = reps[1], reps[2]
        per_stripe = one.conv_cycles / stripes
        assert two.conv_cycles <= one.conv_cycles / 2 + per_stripe

    def test_instance_stall_field_defaults_zero(self, rng):
        m = toy = random_toy_model(np.random.default_rng(3))
        img = np.random.default_rng(4).integers(-127, 128, size=m.input_shape).astype(np.int16)
        _, rep = run_on(m, img, cfg256())
        assert all(r.stall_cycles == 0 for r in rep.rows)


class TestFaults:
    def test_unmaterialized_program_faults(self, rng):
        m = toy_conv = conv_model(np.ones((1, 1, 1, 1), np.int16), 4, 4)
        prog = driver.compile_program(
            m, None, BankConfig(4, 100), nnz={"c": np.zeros((4, 1), np.int16)}, materialize=False
        )
        tiled = layout.tile_tensor(np.zeros(16, np.int16), 1, 4, 4)
        with pytest.raises(EngineFault):
            exec_program(prog, tiled, cfg256())

    def test_config_mismatch_faults(self, rng):
        m = conv_model(np.ones((1, 1, 1, 1), np.int16), 4, 4)
        prog = build(m)
        with pytest.raises(EngineFault):
            exec_program(prog, layout.tile_tensor(np.zeros(16), 1, 4, 4), cfg256(instances=2))
