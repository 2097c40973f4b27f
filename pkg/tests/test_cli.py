import json
import subprocess
import sys

import numpy as np
import pytest

from lowcal.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from lowcal.experiments import read_csv
from lowcal.io import load_cloud
from lowcal.pipeline import SceneSet

TINY = "epochs = 2\nsteps_per_epoch = 2\ntrain_scenes = 3\nval_scenes = 1\neval_per_scene = 1\n"


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture
def data(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--count", "3", "--seed", "5"]) == EXIT_OK
    return tmp_path / "data"


def _files(d):
    return {f.name: f.read_bytes() for f in sorted(d.iterdir())}


def test_synth_zero_count(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "e"), "--count", "0"]) == EXIT_OK
    manifest = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert manifest["scenes"] == []
    assert capsys.readouterr().out.strip().endswith("manifest.json")


def test_synth_is_reproducible_and_loadable(tmp_path, data):
    assert main(["synth", "--out", str(tmp_path / "again"), "--count", "3", "--seed", "5"]) == EXIT_OK
    assert _files(data) == _files(tmp_path / "again")
    assert len([f for f in data.iterdir() if f.suffix == ".bin"]) == 3
    raw = (data / "scene_0000.bin").read_bytes()
    cloud = load_cloud(data / "scene_0000.bin")
    assert len(raw) == 16 * len(cloud)
    assert len(SceneSet.load(data / "manifest.json")) == 3


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("LOWCAL_SEED", "5")
    assert main(["synth", "--out", str(tmp_path / "env"), "--count", "1"]) == EXIT_OK
    assert main(["synth", "--out", str(tmp_path / "flag"), "--count", "1", "--seed", "5"]) == EXIT_OK
    assert _files(tmp_path / "env") == _files(tmp_path / "flag")
    monkeypatch.setenv("LOWCAL_SEED", "five")
    assert main(["synth", "--out", str(tmp_path / "x"), "--count", "1"]) == EXIT_USAGE


def test_train_logs_and_reproduces(tmp_path, tiny_cfg, capsys):
    assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "a.ckpt"), "--seed", "3"]) == EXIT_OK
    log = capsys.readouterr().out.strip().split("\n")
    assert [line.split(",")[:2] for line in log] == [["0", "1"], ["1", "3"]]
    assert all(float(line.split(",")[2]) > 0 for line in log)
    assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "b.ckpt"), "--seed", "3"]) == EXIT_OK
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_calibrate_identity_checkpoint(tmp_path, data, capsys):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text("epochs = 1\nsteps_per_epoch = 0\ntrain_scenes = 1\nval_scenes = 0\n")
    ckpt = tmp_path / "init.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(ckpt)]) == EXIT_OK
    capsys.readouterr()
    args = ["calibrate", "--chain", str(ckpt), "--cloud", str(data / "scene_0001.bin"), "--image", str(data / "scene_0001.ppm")]
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out == "1 0 0 0 0 0 0\n"
    assert main(args + ["--extrinsic", str(data / "scene_0001.ext")]) == EXIT_OK
    assert capsys.readouterr().out == "1 0 0 0 0 0 0\n"


def test_calibrate_prints_full_precision(tmp_path, data, tiny_cfg, capsys):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(tiny_cfg), "--out", str(ckpt)])
    capsys.readouterr()
    assert main(["calibrate", "--chain", f"{ckpt},{ckpt}", "--cloud", str(data / "scene_0000.bin"), "--image", str(data / "scene_0000.ppm")]) == EXIT_OK
    vals = [float(v) for v in capsys.readouterr().out.split()]
    assert len(vals) == 7
    assert abs(np.linalg.norm(vals[:4]) - 1.0) < 1e-12


def test_eval_writes_csv(tmp_path, data, tiny_cfg, capsys):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(tiny_cfg), "--out", str(ckpt)])
    out = tmp_path / "eval.csv"
    argv = ["eval", "--chain", str(ckpt), "--data", str(data / "manifest.json"), "--seed", "2", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = read_csv(out)
    assert [(r.kind, r.param) for r in rows] == [("eval", "10/1")]
    first = out.read_bytes()
    assert main(argv) == EXIT_OK
    assert out.read_bytes() == first


def test_experiment_writes_csv_and_png(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "rep" / "sub.csv"
    assert main(["experiment", "--kind", "subsample", "--config", str(tiny_cfg), "--grid", "2", "--out", str(out)]) == EXIT_OK
    assert [r.param for r in read_csv(out)] == ["2"]
    assert out.with_suffix(".png").read_bytes()[:4] == b"\x89PNG"


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--probes", "3", "--coords", "5"]) == EXIT_OK
    assert "0 failures" in capsys.readouterr().out


def test_gradcheck_fails_on_impossible_tolerance(capsys):
    assert main(["gradcheck", "--probes", "2", "--coords", "0", "--tol", "0"]) == EXIT_RUNTIME


def _exit_code(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["synth"],
        ["synth", "--out", "x", "--count", "many"],
        ["synth", "--out", "x", "--count", "-1"],
        ["experiment", "--kind", "nope"],
        ["calibrate", "--chain", ",", "--cloud", "c", "--image", "i"],
    ],
)
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert _exit_code(argv) == EXIT_USAGE


def test_config_error_names_line(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 2\n\nlr = fast\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "bad.cfg:3" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    code = main(["calibrate", "--chain", str(tmp_path / "none.ckpt"), "--cloud", "c", "--image", "i"])
    assert code == EXIT_RUNTIME
    assert "none.ckpt" in capsys.readouterr().err


def test_unwritable_output_names_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--out", str(blocker / "sub"), "--count", "1"]) == EXIT_RUNTIME
    assert str(blocker) in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lowcal.cli", "synth", "--out", str(tmp_path), "--count", "0"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "lowcal.cli", "--nope"], capture_output=True, text=True)
    assert bad.returncode == 1
