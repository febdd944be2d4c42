import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gradalign.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, RunDirectory, main, parse_args, parse_fraction, sha256
from gradalign.netzoo import linear_net, load_checkpoint, mlp, save_checkpoint

GOLDEN = Path(__file__).parent / "golden" / "csv_headers.txt"
MOONS = ["--data", "moons", "--n", "120"]
DIGITS = ["--data", "digits", "--n", "48", "--side", "8", "--count", "4"]


def golden_headers():
    out = {}
    for line in GOLDEN.read_text().splitlines():
        name, cols = line.split(": ")
        out[name] = cols.split(",")
    return out


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def moons_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("moons")
    assert run("train", *MOONS, "--arch", "mlp", "--hidden", "8", "--epochs", "3", "--batch-size", "16",
               "--lr", "0.01", "--out", out) == EXIT_OK
    return out / "checkpoint.bin"


@pytest.fixture(scope="module")
def digits_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    assert run("train", *DIGITS, "--width", "3", "--epochs", "1", "--batch-size", "16", "--out", out) == EXIT_OK
    return out / "checkpoint.bin"


@pytest.fixture(scope="module")
def linear_ckpt(tmp_path_factory):
    return save_checkpoint(linear_net(2, 2, seed=4), tmp_path_factory.mktemp("linear") / "linear.bin")


class TestParsing:
    def test_fraction(self):
        assert parse_fraction("8/255") == 8 / 255
        assert parse_fraction(" 0.25 ") == 0.25
        with pytest.raises(Exception):
            parse_fraction("eight")
        with pytest.raises(Exception):
            parse_fraction("1/0")

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lambda-cos = 2\neps = 4/255\nreg = l2cos\n[train]\nepochs = 7\n")
        args = parse_args(["train", "--config", str(cfg), "--epochs", "3", "--out", str(tmp_path)])
        assert args.lambda_cos == 2.0 and args.eps == 4 / 255 and args.reg == "l2cos"
        assert args.epochs == 3

    def test_config_errors(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("no-such-option = 1\n")
        assert run("train", "--config", bad, "--out", tmp_path / "a") == EXIT_CONFIG
        bad.write_text("reg = magic\n")
        assert run("train", "--config", bad, "--out", tmp_path / "a") == EXIT_CONFIG
        assert run("train", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "a") == EXIT_CONFIG

    def test_exit_codes(self, tmp_path, capsys):
        assert run("train", "--reg", "nope", "--out", tmp_path / "a") == EXIT_CONFIG
        assert run("train", "--epochs", "x", "--out", tmp_path / "a") == EXIT_CONFIG
        assert run("train") == EXIT_CONFIG
        assert run("attack", "--out", tmp_path / "b") == EXIT_CONFIG  # no checkpoint
        assert run("attack", "--checkpoint", tmp_path / "missing.bin", "--out", tmp_path / "c") == EXIT_RUNTIME
        assert "config error" in capsys.readouterr().err
        assert run("--help") == EXIT_OK


class TestTrain:
    def test_zero_epochs_keeps_initialization(self, tmp_path):
        assert run("train", *MOONS, "--arch", "mlp", "--hidden", "5", "--seed", "3", "--epochs", "0",
                   "--out", tmp_path) == EXIT_OK
        got = load_checkpoint(tmp_path / "checkpoint.bin")
        init = mlp(2, [5], 2, seed=3)
        for a, b in zip(got.parameters(), init.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_artifacts_and_manifest(self, moons_ckpt):
        out = moons_ckpt.parent
        assert header(out / "loss_log.csv") == golden_headers()["loss_log.csv"]
        assert (out / "loss_curve.png").read_bytes()[:4] == b"\x89PNG"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["config"]["hidden"] == [8]
        assert not (out / ".lock").exists()
        for name, digest in manifest["artifacts"].items():
            assert sha256(out / name) == digest

    def test_rerun_from_manifest_is_bit_identical(self, moons_ckpt, tmp_path):
        assert run("train", "--config", moons_ckpt.parent / "manifest.json", "--out", tmp_path) == EXIT_OK
        assert (tmp_path / "checkpoint.bin").read_bytes() == moons_ckpt.read_bytes()

    def test_avg_pool_option(self, tmp_path):
        assert run("train", *DIGITS, "--width", "2", "--pool", "avg", "--epochs", "0", "--out", tmp_path) == EXIT_OK
        kinds = [layer.spec.kind for layer in load_checkpoint(tmp_path / "checkpoint.bin").layers]
        assert "avgpool2d" in kinds and "maxpool2d" not in kinds

    def test_arch_data_mismatch(self, tmp_path):
        assert run("train", *MOONS, "--arch", "mini_lenet", "--out", tmp_path) == EXIT_CONFIG


class TestLock:
    def test_locked_directory_fails(self, tmp_path):
        with RunDirectory(tmp_path):
            assert run("train", *MOONS, "--arch", "mlp", "--epochs", "0", "--out", tmp_path) == EXIT_RUNTIME
        assert not (tmp_path / ".lock").exists()
        assert run("train", *MOONS, "--arch", "mlp", "--epochs", "0", "--out", tmp_path) == EXIT_OK


class TestCommands:
    def test_surface_linear_net(self, linear_ckpt, tmp_path):
        assert run("surface", "--checkpoint", linear_ckpt, *MOONS, "--grid", "6", "--out", tmp_path) == EXIT_OK
        grid = rows(tmp_path / "surface.csv")
        assert len(grid) == 36 and header(tmp_path / "surface.csv") == golden_headers()["surface.csv"]
        arrows = {(r["grad_x1"], r["grad_x2"]) for r in grid}
        assert len(arrows) == 1
        pair = rows(tmp_path / "pair.csv")[0]
        assert float(pair["cossim"]) == pytest.approx(1.0) and float(pair["l2_distance"]) == 0.0
        assert (tmp_path / "surface.png").exists()

    def test_surface_rejects_image_net(self, digits_ckpt, tmp_path):
        assert run("surface", "--checkpoint", digits_ckpt, "--out", tmp_path) == EXIT_CONFIG

    def test_bound_sweep(self, moons_ckpt, linear_ckpt, tmp_path):
        assert run("bound-sweep", "--checkpoint", moons_ckpt, *MOONS, "--points", "20",
                   "--eps-list", "1e-4,1e-3", "--out", tmp_path / "a") == EXIT_OK
        table = rows(tmp_path / "a" / "bound_sweep.csv")
        assert len(table) == 2 and all(float(r["fraction_within"]) >= 0.99 for r in table)
        assert run("bound-sweep", "--checkpoint", linear_ckpt, *MOONS, "--points", "10",
                   "--out", tmp_path / "b") == EXIT_OK
        for r in rows(tmp_path / "b" / "bound_sweep.csv"):
            assert float(r["mean_crc"]) == 0.0 and float(r["mean_bound"]) == 0.0

    def test_eval_rps_linear_net(self, linear_ckpt, tmp_path):
        assert run("eval-rps", "--checkpoint", linear_ckpt, *MOONS, "--count", "5", "--methods", "grad,xgrad",
                   "--measures", "cossim", "--samples", "2", "--eps-list", "8/255", "--out", tmp_path) == EXIT_OK
        table = rows(tmp_path / "rps.csv")
        assert header(tmp_path / "rps.csv") == golden_headers()["rps.csv"]
        assert float(table[0]["rps"]) == pytest.approx(1.0) and float(table[0]["epsilon"]) == 8 / 255
        assert (tmp_path / "rps.png").exists()

    def test_attack_zero_budget(self, digits_ckpt, tmp_path):
        assert run("attack", "--checkpoint", digits_ckpt, *DIGITS, "--attack-eps", "0", "--iters", "2",
                   "--frame-width", "1", "--out", tmp_path) == EXIT_OK
        path = tmp_path / "attack_summary.csv"
        assert header(path) == golden_headers()["attack_summary.csv"]
        for r in rows(path):
            assert float(r["linf"]) == 0.0 and r["preserved"] == "1"
            assert float(r["cossim_original"]) == pytest.approx(1.0)
        assert (tmp_path / "samples" / "0000_map_adv.pgm").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["attack"]["preserved_fraction"] == 1.0

    def test_eval_insertion(self, digits_ckpt, tmp_path):
        assert run("eval-insertion", "--checkpoint", digits_ckpt, *DIGITS, "--methods", "grad,lrp", "--iters", "2",
                   "--frame-width", "1", "--out", tmp_path) == EXIT_OK
        golden = golden_headers()
        assert header(tmp_path / "insertion.csv") == golden["insertion.csv"]
        assert header(tmp_path / "insertion_summary.csv") == golden["insertion_summary.csv"]
        curves = {r["curve"] for r in rows(tmp_path / "insertion_summary.csv")}
        assert curves == {"ins/grad", "a-ins/grad", "ins/lrp", "a-ins/lrp"}
        assert (tmp_path / "insertion.png").exists()

    def test_attribute(self, digits_ckpt, tmp_path):
        assert run("attribute", "--checkpoint", digits_ckpt, *DIGITS, "--count", "2", "--methods", "grad,gbp",
                   "--out", tmp_path) == EXIT_OK
        assert (tmp_path / "gbp_0001.pgm").exists() and (tmp_path / "attributions.png").exists()

    def test_shape_mismatch_is_config_error(self, moons_ckpt, tmp_path):
        assert run("attack", "--checkpoint", moons_ckpt, *DIGITS, "--out", tmp_path) == EXIT_CONFIG

    def test_outputs_reproducible(self, digits_ckpt, tmp_path):
        argv = ["eval-rps", "--checkpoint", digits_ckpt, *DIGITS, "--methods", "grad", "--samples", "2"]
        assert run(*argv, "--out", tmp_path / "a") == EXIT_OK and run(*argv, "--out", tmp_path / "b") == EXIT_OK
        assert (tmp_path / "a" / "rps.csv").read_bytes() == (tmp_path / "b" / "rps.csv").read_bytes()


class TestPipeline:
    def test_full_digits_pipeline_is_fast(self, tmp_path):
        start = time.perf_counter()
        assert run("train", "--reg", "l2cos", "--lambda-l2", "0.01", "--epochs", "3", "--batch-size", "32",
                   "--lr", "3e-3", "--out", tmp_path / "train") == EXIT_OK
        ckpt = tmp_path / "train" / "checkpoint.bin"
        for name, extra in (("eval-rps", ["--count", "20"]), ("attack", ["--count", "8"]),
                            ("eval-insertion", ["--count", "20", "--iters", "20"]),
                            ("bound-sweep", ["--points", "50"]), ("attribute", ["--count", "3"])):
            assert run(name, "--checkpoint", ckpt, *extra, "--out", tmp_path / name) == EXIT_OK, name
        assert time.perf_counter() - start < 600
        for png in ("train/loss_curve.png", "eval-rps/rps.png", "eval-insertion/insertion.png",
                    "bound-sweep/bound_sweep.png", "attack/attack_examples.png"):
            assert (tmp_path / png).stat().st_size > 0
