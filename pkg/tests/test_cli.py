import csv
import json
import math

import numpy as np
import pytest

from dynscene import __version__
from dynscene.cli import (EXIT_CONFIG, EXIT_STAGE, THREADS_ENV, ConfigError, apply_overrides, cmd_eval,
                          load_config, main)
from dynscene.errors import ManifestMismatch
from dynscene.flow2d import FrameSequence, read_flo, write_flo, write_sequence
from dynscene.fixtures import make_scene
from dynscene.io import read_pfm, write_png
from dynscene.mom import MotionField3D, project_motion
from dynscene.pipeline import config_hash

FAST = ["--set", "mom.iterations=40", "--set", "gsplat.steps=3", "--set", "deform.steps=2",
        "--set", "deform.frames=3", "--set", "render.frames=4"]


@pytest.fixture(scope="module")
def plane_wave_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pw")
    assert main(["fixtures", "plane_wave", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def full_run(plane_wave_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "--input", str(plane_wave_dir), "--out", str(out), "--set", "gsplat.steps=3",
                 "--set", "deform.steps=2", "--set", "deform.frames=3", "--set", "render.frames=4"])
    assert code == 0
    return out


# -- fixtures ------------------------------------------------------------------
def test_fixture_regeneration_is_bit_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["fixtures", "two_layer", str(tmp_path / name), "--frames", "3"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_fixture_flows_equal_projected_motion(plane_wave_dir, plane_wave_scene):
    sc = plane_wave_scene
    for i, cam in enumerate(sc.cameras):
        flow = read_flo(plane_wave_dir / f"flow_view{i:03d}.flo")
        X, _, _ = sc.raycast(cam)
        valid = sc.gt_flow(cam).valid_mask.reshape(-1)
        Xv = X.reshape(-1, 3)[valid]
        sp = project_motion(MotionField3D(Xv, Xv + sc.motion(Xv), np.arange(len(Xv))), cam)
        v, u = np.nonzero(valid.reshape(cam.shape))
        assert np.max(np.abs(sp.start - np.column_stack([u, v]))) < 1e-6
        got = np.column_stack([flow.u[v, u], flow.v[v, u]])
        assert np.max(np.abs(sp.displacement - got[sp.index])) < 1e-6


def test_two_layer_depth_has_two_modes(tmp_path):
    assert main(["fixtures", "two_layer", str(tmp_path), "--frames", "2"]) == 0
    depth = read_pfm(tmp_path / "depth.pfm")
    assert np.unique(depth).tolist() == [2.0, 5.0]


def test_waterfall_fixture_writes_heldout_videos(tmp_path):
    sc = make_scene("waterfall")
    assert main(["fixtures", "waterfall", str(tmp_path), "--frames", "2"]) == 0
    assert len(list(tmp_path.glob("heldout_*/manifest.json"))) == len(sc.heldout)
    assert (tmp_path / "heldout_000" / "mask.pgm").exists()


# -- run ------------------------------------------------------------------------
def test_stage_mom_stops_after_motion_outputs(plane_wave_dir, tmp_path):
    assert main(["run", "--input", str(plane_wave_dir), "--out", str(tmp_path), "--stage", "mom"] + FAST) == 0
    mom = tmp_path / "mom"
    assert (mom / "motion.ply").exists() and (mom / "loss.csv").exists()
    for later in ("static", "deform", "render", "eval"):
        assert not (tmp_path / later).exists()
    rows = list(csv.reader(open(mom / "loss.csv")))
    assert len(rows) == 42


def test_same_seed_rerun_gives_identical_motion(plane_wave_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["lift-motion", "--input", str(plane_wave_dir), "--out", str(tmp_path / name)] + FAST) == 0
    assert (tmp_path / "a/mom/motion.ply").read_bytes() == (tmp_path / "b/mom/motion.ply").read_bytes()


def test_full_run_is_consistent(full_run):
    report = json.loads((full_run / "mom" / "report.json").read_text())
    assert report["consistency_epe_reprojected"] <= 0.01
    assert (full_run / "static" / "gaussians.ply").exists()
    assert (full_run / "deform" / "model.bin").exists()
    frames = sorted((full_run / "render").glob("frame_*.png"))
    assert len(frames) == 4


def test_every_stage_directory_has_a_manifest(full_run):
    cfg = json.loads((full_run / "config.json").read_text())
    for stage in ("views", "mom", "static", "deform", "render"):
        m = json.loads((full_run / stage / "manifest.json").read_text())
        assert m["stage"] == stage and m["version"] == __version__
        assert m["config_hash"] == config_hash(cfg)
        for f in m["files"]:
            assert (full_run / stage / f).exists()


def test_stage_commands_reload_earlier_artifacts(plane_wave_dir, full_run):
    assert main(["render", "--input", str(plane_wave_dir), "--out", str(full_run), "--set", "render.frames=2",
                 "--set", "render.camera_schedule=fixed"]) == 0
    assert len(sorted((full_run / "render").glob("frame_*.png"))) >= 2


def test_missing_artifact_is_a_stage_error(plane_wave_dir, tmp_path, capsys):
    code = main(["render", "--input", str(plane_wave_dir), "--out", str(tmp_path)])
    assert code == EXIT_STAGE
    assert "[render]" in capsys.readouterr().err


def test_eval_stage_on_waterfall(tmp_path):
    scene_dir = tmp_path / "wf"
    assert main(["fixtures", "waterfall", str(scene_dir), "--frames", "2"]) == 0
    out = tmp_path / "out"
    assert main(["run", "--input", str(scene_dir), "--out", str(out), "--set", "mom.iterations=5",
                 "--set", "gsplat.steps=2", "--set", "deform.steps=1", "--set", "deform.frames=2",
                 "--set", "render.frames=2"]) == 0
    d = json.loads((out / "eval" / "report.json").read_text())
    assert len(d["frames"]) == 8 and d["M.PSNR"] is not None


# -- config -----------------------------------------------------------------------
def test_config_overrides_and_validation(plane_wave_dir, tmp_path):
    cfg = load_config(None, ["mom.iterations=7", "deform.sampled_views=[0,2]"], input=str(plane_wave_dir))
    assert cfg["mom"]["iterations"] == 7 and cfg["deform"]["sampled_views"] == [0, 2]
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["mom.nonsense=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["novalue"])
    with pytest.raises(ConfigError):
        load_config(None, input=str(tmp_path))
    with pytest.raises(ConfigError):
        load_config(None, ["trajectory.n_views=0"], input=str(plane_wave_dir))
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"input": str(plane_wave_dir), "seed": 4}))
    assert load_config(path)["seed"] == 4


def test_config_errors_exit_with_config_code(tmp_path, capsys):
    assert main(["run", "--input", str(tmp_path / "missing")]) == EXIT_CONFIG
    assert "[config]" in capsys.readouterr().err


def test_threads_flag_and_environment(plane_wave_dir, tmp_path, monkeypatch):
    import contextlib

    import dynscene.cli as cli

    seen = []

    def record(limits):
        seen.append(limits)
        return contextlib.nullcontext()

    monkeypatch.setattr(cli, "threadpool_limits", record)
    monkeypatch.setenv(THREADS_ENV, "3")
    assert main(["lift-motion", "--input", str(plane_wave_dir), "--out", str(tmp_path / "a")] + FAST) == 0
    assert main(["--threads", "2", "lift-motion", "--input", str(plane_wave_dir), "--out", str(tmp_path / "b")]
                + FAST) == 0
    monkeypatch.delenv(THREADS_ENV)
    assert main(["lift-motion", "--input", str(plane_wave_dir), "--out", str(tmp_path / "c")] + FAST) == 0
    assert seen == [3, 2, 1]
    assert (tmp_path / "a/mom/motion.ply").read_bytes() == (tmp_path / "c/mom/motion.ply").read_bytes()
    monkeypatch.setenv(THREADS_ENV, "many")
    assert main(["lift-motion", "--input", str(plane_wave_dir)]) == EXIT_CONFIG


# -- eval and metrics -------------------------------------------------------------
def video(tmp_path, name, frames, times, view=0):
    return write_sequence(FrameSequence(frames, times), tmp_path / name, {"view": view})


def test_eval_identical_sequences(tmp_path, waterfall_scene):
    frames = [waterfall_scene.render_gt(c) for c in waterfall_scene.heldout[:3]]
    gt = video(tmp_path, "gt", frames, [0.0, 0.5, 0.75])
    pred = video(tmp_path, "pred", frames, [0.0, 0.5, 0.75])
    report = cmd_eval(pred, gt, out_dir=tmp_path / "ev")
    assert all(math.isinf(f["psnr"]) and f["ssim"] == 1.0 for f in report.frames)
    assert json.loads((tmp_path / "ev" / "report.json").read_text())["PSNR"] == "inf"


def test_eval_aggregate_is_mean_of_rows(tmp_path, waterfall_scene):
    sc = waterfall_scene
    gt = video(tmp_path, "gt", [sc.render_gt(c) for c in sc.heldout[:3]], [0.0, 0.1, 0.2])
    pred = video(tmp_path, "pred", [sc.render_gt(c) for c in sc.heldout[1:4]], [0.0, 0.1, 0.2])
    cmd_eval(pred, gt, out_dir=tmp_path / "ev")
    rows = list(csv.DictReader(open(tmp_path / "ev" / "report.csv")))
    per_frame, mean = rows[:-1], rows[-1]
    for col in ("PSNR", "SSIM"):
        assert abs(np.mean([float(r[col]) for r in per_frame]) - float(mean[col])) < 1e-9


def test_eval_rejects_misaligned_manifests(tmp_path):
    f = [np.zeros((12, 12, 3))] * 2
    gt = video(tmp_path, "gt", f, [0.0, 0.5])
    with pytest.raises(ManifestMismatch):
        cmd_eval(video(tmp_path, "p1", f, [0.0, 0.4]), gt)
    with pytest.raises(ManifestMismatch):
        cmd_eval(video(tmp_path, "p2", f, [0.0, 0.5], view=3), gt)
    assert main(["eval", str(tmp_path / "p1"), str(gt)]) == EXIT_STAGE


def test_metrics_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(16, 16, 3))
    write_png(tmp_path / "a.png", a)
    assert main(["metrics", str(tmp_path / "a.png"), str(tmp_path / "a.png")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"PSNR": "inf", "SSIM": 1.0}
    from dynscene.flow2d import FlowField2D

    write_flo(FlowField2D(np.zeros((4, 4)), np.zeros((4, 4))), tmp_path / "a.flo")
    write_flo(FlowField2D(np.full((4, 4), 3.0), np.full((4, 4), 4.0)), tmp_path / "b.flo")
    assert main(["metrics", str(tmp_path / "a.flo"), str(tmp_path / "b.flo")]) == 0
    assert json.loads(capsys.readouterr().out)["EPE"] == pytest.approx(5.0)
