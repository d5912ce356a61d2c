"""End-to-end exercises of the command line front end.

The pipeline fixture drives make-data -> build-conceptual -> train-cfg ->
train once per module and the individual tests pick over the artifacts.
"""
import argparse
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from voxdet import cli
from voxdet.config import (
    DataPaths,
    default_run_config,
    load_config,
    loads_config,
    mini_run_config,
    save_config,
)
from voxdet.geometry import Box3D
from voxdet.render import read_ppm


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_pipeline")
    scenes = root / "scenes"
    rcs = {}
    rcs["make"] = cli.main([
        "make-data", "--out", str(scenes), "--scenes", "3", "--seed", "7",
        "--cars", "2", "--base-points", "160"])
    cfg = mini_run_config()
    cfg = replace(
        cfg,
        data=DataPaths(scenes=str(scenes),
                       conceptual=str(root / "conceptual"),
                       out=str(root / "runs")),
        train=replace(cfg.train, epochs=2, batch_size=2))
    cfg_path = root / "run.yaml"
    save_config(cfg_path, cfg)
    rcs["build"] = cli.main(["build-conceptual", "--config", str(cfg_path)])
    rcs["train_cfg"] = cli.main(["train-cfg", "--config", str(cfg_path)])
    rcs["train"] = cli.main(["train", "--config", str(cfg_path)])
    return {"root": root, "cfg": cfg, "cfg_path": str(cfg_path), "rcs": rcs}


def test_pipeline_exit_codes(pipeline):
    assert pipeline["rcs"] == {"make": 0, "build": 0, "train_cfg": 0, "train": 0}


def test_make_data_layout(pipeline):
    scenes = pipeline["root"] / "scenes"
    names = sorted(p.name for p in scenes.iterdir())
    assert names == ["scene_0000", "scene_0001", "scene_0002"]
    for name in names:
        assert (scenes / name / "points.bin").is_file()
        assert (scenes / name / "boxes.txt").is_file()


def test_build_conceptual_outputs(pipeline):
    conceptual = pipeline["root"] / "conceptual"
    for name in ("scene_0000", "scene_0001", "scene_0002"):
        assert (conceptual / name / "points.bin").is_file()
    report = (conceptual / "report.txt").read_text()
    lines = report.splitlines()
    assert lines[0] == "scene objects fallbacks mean_distance"
    assert len(lines) == 4
    for line in lines[1:]:
        name, objects, fallbacks, mean_d = line.split()
        assert int(objects) == 2
        assert int(fallbacks) >= 0
        float(mean_d)


def test_build_conceptual_rerun_is_byte_identical(pipeline):
    conceptual = pipeline["root"] / "conceptual"
    files = [conceptual / "report.txt"]
    files += sorted(conceptual.glob("scene_*/points.bin"))
    files += sorted(conceptual.glob("scene_*/boxes.txt"))
    before = {f: f.read_bytes() for f in files}
    assert cli.main(["build-conceptual", "--config", pipeline["cfg_path"]]) == 0
    assert {f: f.read_bytes() for f in files} == before


def test_training_artifacts(pipeline):
    runs = pipeline["root"] / "runs"
    assert (runs / "cfg.ckpt").is_file()
    assert (runs / "pfe.ckpt").is_file()
    for log in ("cfg_log.txt", "train_log.txt"):
        lines = (runs / log).read_text().splitlines()
        assert lines[0] == "epoch bbox cls assoc total"
        assert len(lines) == 3  # header + 2 epochs


def test_train_cfg_rerun_is_byte_identical(pipeline):
    runs = pipeline["root"] / "runs"
    before = (runs / "cfg.ckpt").read_bytes()
    log_before = (runs / "cfg_log.txt").read_bytes()
    assert cli.main(["train-cfg", "--config", pipeline["cfg_path"]]) == 0
    assert (runs / "cfg.ckpt").read_bytes() == before
    assert (runs / "cfg_log.txt").read_bytes() == log_before


def test_train_without_reference_checkpoint_is_missing(pipeline, capsys):
    cfg = replace(pipeline["cfg"],
                  data=replace(pipeline["cfg"].data,
                               out=str(pipeline["root"] / "empty_runs")))
    path = pipeline["root"] / "fresh.yaml"
    save_config(path, cfg)
    assert cli.main(["train", "--config", str(path)]) == 3
    assert "reference checkpoint not found" in capsys.readouterr().err


def test_eval_writes_report(pipeline, capsys):
    assert cli.main(["eval", "--config", pipeline["cfg_path"]]) == 0
    out = capsys.readouterr().out
    assert "overall ap" in out
    assert "metric bev" in out
    on_disk = (pipeline["root"] / "runs" / "eval_real.txt").read_text()
    assert on_disk == out


def test_eval_conceptual_dataset(pipeline):
    ckpt = str(pipeline["root"] / "runs" / "cfg.ckpt")
    rc = cli.main(["eval", "--config", pipeline["cfg_path"],
                   "--dataset", "conceptual", "--checkpoint", ckpt])
    assert rc == 0
    assert (pipeline["root"] / "runs" / "eval_conceptual.txt").is_file()


def test_eval_out_override(pipeline):
    other = pipeline["root"] / "elsewhere"
    ckpt = str(pipeline["root"] / "runs" / "pfe.ckpt")
    rc = cli.main(["eval", "--config", pipeline["cfg_path"],
                   "--out", str(other), "--checkpoint", ckpt])
    assert rc == 0
    assert (other / "eval_real.txt").is_file()


def test_render_bev(pipeline, capsys):
    ckpt = str(pipeline["root"] / "runs" / "pfe.ckpt")
    rc = cli.main(["render-bev", "--config", pipeline["cfg_path"],
                   "--checkpoint", ckpt, "--scene", "0", "--scale", "2"])
    assert rc == 0
    capsys.readouterr()
    img = read_ppm(str(pipeline["root"] / "runs" / "bev_scene_0000.ppm"))
    # mini grid is 64x64 voxels in BEV, doubled by --scale 2
    assert img.shape == (128, 128, 3)
    assert img.dtype == np.uint8


def test_render_bev_scene_out_of_range(pipeline, capsys):
    rc = cli.main(["render-bev", "--config", pipeline["cfg_path"],
                   "--scene", "99"])
    assert rc == 4
    assert "out of range" in capsys.readouterr().err


def test_seed_and_out_overrides_resolve():
    cfg = mini_run_config()
    path = "/tmp/voxdet_override_test.yaml"
    save_config(path, cfg)
    try:
        ns = argparse.Namespace(config=path, seed=11, out="elsewhere")
        got = cli._resolve_config(ns)
        assert got.seed == 11
        assert got.train.seed == 11
        assert got.data.out == "elsewhere"
        ns = argparse.Namespace(config=path, seed=None, out=None)
        got = cli._resolve_config(ns)
        assert got.seed == cfg.seed
        assert got.data.out == cfg.data.out
    finally:
        os.remove(path)


def test_missing_config_exits_3(tmp_path, capsys):
    path = tmp_path / "nope.yaml"
    assert cli.main(["eval", "--config", str(path)]) == 3
    assert "nope.yaml" in capsys.readouterr().err


def test_invalid_config_exits_4(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("bogus_section:\n  a: 1\n")
    assert cli.main(["eval", "--config", str(path)]) == 4
    assert "error:" in capsys.readouterr().err


def test_dump_defaults_roundtrip(capsys):
    assert cli.main(["--dump-defaults"]) == 0
    text = capsys.readouterr().out
    assert loads_config(text) == default_run_config()


def test_no_command_is_usage_error(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--definitely-not-a-flag"])
    assert exc.value.code == 2


def test_bad_choice_exits_2(pipeline):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--config", pipeline["cfg_path"],
                  "--dataset", "bogus"])
    assert exc.value.code == 2


def test_thread_env_validation(monkeypatch, capsys):
    monkeypatch.setattr(cli, "_RAW_THREADS", "abc")
    assert cli.main(["--dump-defaults"]) == 4
    assert "VOXDET_THREADS" in capsys.readouterr().err
    monkeypatch.setattr(cli, "_RAW_THREADS", "0")
    assert cli.main(["--dump-defaults"]) == 4
    capsys.readouterr()
    monkeypatch.setattr(cli, "_RAW_THREADS", "8")
    assert cli.main(["--dump-defaults"]) == 0
    capsys.readouterr()


def test_thread_env_propagates_to_blas_pools(monkeypatch):
    pools = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
             "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
    for var in pools:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("VOXDET_THREADS", "3")
    assert cli._apply_thread_env() == "3"
    for var in pools:
        assert os.environ[var] == "3"
    # explicit pool settings win over the convenience variable
    monkeypatch.setenv("OMP_NUM_THREADS", "5")
    cli._apply_thread_env()
    assert os.environ["OMP_NUM_THREADS"] == "5"


def test_thread_env_rejected_in_subprocess():
    env = dict(os.environ, VOXDET_THREADS="abc")
    proc = subprocess.run(
        [sys.executable, "-m", "voxdet.cli", "--dump-defaults"],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 4
    assert "VOXDET_THREADS" in proc.stderr


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "all ops within" in out
    assert out.count("op ") == 7


def test_selftest_command(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "all suites passed" in out
    assert out.count("suite ") == 5
    assert " FAIL " not in out


def test_sparse_oracle_helper_tight():
    assert cli.run_sparse_oracle(n_cases=10, seed=3) < 1e-12


def test_codec_roundtrip_helper_tight():
    assert cli.run_codec_roundtrip(300) < 1e-9


def test_mc_iou_estimator():
    a = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
    assert cli.mc_iou_bev(a, a, 50_000, seed=0) == 1.0
    b = Box3D(10.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
    assert cli.mc_iou_bev(a, b, 50_000, seed=0) == 0.0
    c = Box3D(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
    est = cli.mc_iou_bev(a, c, 400_000, seed=0)
    assert est == pytest.approx(1.0 / 3.0, abs=2e-2)
