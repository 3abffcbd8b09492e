import json
import os
import subprocess
import sys

import pytest

from hogs.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from hogs.config import RunConfig
from hogs.pipeline import fixture_dir, stage_dir
from hogs.util import read_json, write_json


def write_small_config(path, seed=0):
    cfg = RunConfig()
    cfg.synth.n_frames = 10
    cfg.synth.n_views = 3
    cfg.synth.image_size = 32
    cfg.contact.feature_dim = 48
    cfg.contact.projected_dim = 16
    cfg.contact.train_frames = 8
    cfg.contact.epochs = 30
    cfg.optimize.iterations = 12
    cfg.benchmark.gaussians = 300
    cfg.sdf.dims = 24
    cfg.apply_overrides(seed=seed)
    cfg.save(path)
    return cfg


def test_missing_config_file_is_config_error(tmp_path):
    code = main(["pipeline", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "w")])
    assert code == EXIT_CONFIG


def test_invalid_config_value_is_config_error(tmp_path):
    path = tmp_path / "bad.json"
    write_json(path, {"refine": {"alpha": -1.0}})
    code = main(["synth", "--config", str(path), "--out", str(tmp_path / "w")])
    assert code == EXIT_CONFIG


def test_stage_without_upstream_is_stage_error(tmp_path):
    code = main(["track", "--out", str(tmp_path / "w")])
    assert code == EXIT_STAGE


def test_stagewise_run_then_eval(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    write_small_config(cfg_path)
    out = str(tmp_path / "w")
    for cmd in ("synth", "track", "fit-pose", "build-sdf", "contact", "optimize", "eval"):
        code = main([cmd, "--config", str(cfg_path), "--out", out])
        assert code == EXIT_OK, cmd
    report = read_json(tmp_path / "w" / "report.json")
    assert "mean_train_psnr" in report


def test_pipeline_command_and_render_command(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    write_small_config(cfg_path)
    out = tmp_path / "w"
    assert main(["pipeline", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    ckpt = stage_dir(out, "optimize") / "scene_opt.ckpt"
    cam = fixture_dir(out) / "cameras" / "train_00.json"
    gt = fixture_dir(out) / "gt" / "train_view_00.npy"
    code = main([
        "render", "--checkpoint", str(ckpt), "--camera", str(cam),
        "--gt", str(gt), "--frames", "100", "--out", str(tmp_path / "render"),
    ])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["frames"] >= 100
    assert summary["fps"] > 0
    report = read_json(out / "report.json")
    assert summary["psnr"] == report["train_views"]["psnr"][0]
    assert (tmp_path / "render" / "render.png").exists()
    assert (tmp_path / "render" / "render.npy").exists()


def test_render_command_missing_checkpoint(tmp_path):
    code = main([
        "render", "--checkpoint", str(tmp_path / "no.ckpt"),
        "--camera", str(tmp_path / "no.json"), "--out", str(tmp_path / "r"),
    ])
    assert code == EXIT_CONFIG


def test_cli_overrides(tmp_path):
    cfg_path = tmp_path / "config.json"
    write_small_config(cfg_path)
    out = str(tmp_path / "w")
    code = main([
        "synth", "--config", str(cfg_path), "--out", out,
        "--seed", "7", "--views", "2", "--grid-dims", "16", "--no-physics",
    ])
    assert code == EXIT_OK
    saved = read_json(tmp_path / "w" / "fixture" / "manifest.json")
    assert saved["config"]["synth"]["seed"] == 7
    assert saved["config"]["synth"]["n_views"] == 2


def test_threads_env_cap_subprocess(tmp_path):
    cfg_path = tmp_path / "config.json"
    write_small_config(cfg_path)
    env = dict(os.environ)
    env["HOGS_THREADS"] = "8"
    proc = subprocess.run(
        [sys.executable, "-m", "hogs.cli", "synth", "--config", str(cfg_path),
         "--out", str(tmp_path / "w")],
        env=env, capture_output=True, text=True, cwd="/root/pkg",
    )
    assert proc.returncode == EXIT_OK, proc.stderr
