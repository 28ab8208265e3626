"""End-to-end CLI verbs on a small model and the VGG-16 preset."""

import json

import numpy as np
import pytest

from zskp import netmodel
from zskp.cli import main


@pytest.fixture
def toy_manifest(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "w.bin").write_bytes(
        rng.normal(size=(4, 2, 3, 3)).astype("<f4").tobytes()
    )
    (tmp_path / "b.bin").write_bytes(rng.normal(size=4).astype("<f4").tobytes())
    doc = {
        "input": [2, 10, 10],
        "input_scale": 32.0,
        "layers": [
            {"name": "pad", "kind": "pad", "params": {"border": 1}},
            {
                "name": "conv",
                "kind": "conv",
                "params": {"in_channels": 2, "out_channels": 4, "kernel": 3, "act_shift": 5},
                "weights_file": "w.bin",
                "bias_file": "b.bin",
            },
            {"name": "pool", "kind": "maxpool", "params": {"window": [2, 2], "stride": [2, 2]}},
        ],
    }
    p = tmp_path / "toy.json"
    p.write_text(json.dumps(doc))
    return p


def test_quantize_prune_pack_compile(toy_manifest, tmp_path, capsys):
    pruned = tmp_path / "pruned.npz"
    assert main(["prune", "--model", str(toy_manifest), "--sparsity", "0.5", "--out", str(pruned)]) == 0
    q = tmp_path / "q.npz"
    assert main(["quantize", "--model", str(pruned), "--out", str(q)]) == 0
    zskp_file = tmp_path / "model.zskp"
    assert main(["pack", "--in", str(q), "--out", str(zskp_file)]) == 0
    assert zskp_file.read_bytes()[:4] == b"ZSKN"
    dump = tmp_path / "prog.txt"
    assert (
        main(
            ["compile", "--model", str(q), "--weights", str(zskp_file), "--out", str(dump)]
        )
        == 0
    )
    text = dump.read_text()
    assert "CONV conv" in text and "PADPOOL pad" in text
    capsys.readouterr()


def test_run_functional_deterministic(toy_manifest, tmp_path, capsys):
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    tr1, tr2 = tmp_path / "a.trace", tmp_path / "b.trace"
    args = ["run", "--model", str(toy_manifest), "--seed", "5", "--variant", "256-opt"]
    assert main(args + ["--csv", str(out1), "--trace", str(tr1)]) == 0
    assert main(args + ["--csv", str(out2), "--trace", str(tr2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert tr1.read_bytes() == tr2.read_bytes()
    assert out1.read_text().startswith("layer,")
    capsys.readouterr()


def test_run_synthetic_on_vgg16(tmp_path, capsys):
    csv = tmp_path / "vgg.csv"
    code = main(
        [
            "run",
            "--model", str(netmodel.vgg16_manifest_path()),
            "--variant", "512-opt",
            "--synthetic-sparsity", "0.7",
            "--seed", "1",
            "--csv", str(csv),
        ]
    )
    assert code == 0
    lines = csv.read_text().splitlines()
    assert any(l.startswith("conv5_3,") for l in lines)
    capsys.readouterr()


def test_report_reemits_identical_csv(toy_manifest, tmp_path, capsys):
    csv1 = tmp_path / "r1.csv"
    cyc = tmp_path / "cycles.json"
    main(["run", "--model", str(toy_manifest), "--csv", str(csv1), "--cycles-out", str(cyc)])
    csv2 = tmp_path / "r2.csv"
    assert main(["report", "--cycles", str(cyc), "--csv", str(csv2)]) == 0
    assert csv1.read_bytes() == csv2.read_bytes()
    capsys.readouterr()


def test_selftest_passes(capsys):
    assert main(["selftest", "--trials", "5", "--seed", "42"]) == 0
    out = capsys.readouterr().out
    assert "5/5 trials passed" in out


def test_functional_mode_requires_weights(tmp_path, capsys):
    code = main(
        [
            "run",
            "--model", str(netmodel.vgg16_manifest_path()),
            "--mode", "functional",
        ]
    )
    assert code == 1
    assert "functional" in capsys.readouterr().err


def test_error_paths_exit_nonzero(tmp_path, capsys):
    assert main(["quantize", "--model", str(tmp_path / "nope.json"), "--out", "x"]) == 1
    capsys.readouterr()
