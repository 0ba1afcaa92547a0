"""Command-line driver: fixtures, the staged pipeline and evaluation."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import DynSceneError, ManifestMismatch, NoCorrespondence
from .pipeline import StageError, config_hash

log = logging.getLogger("dynscene")

THREADS_ENV = "DYNSCENE_THREADS"
STAGES = ("views", "mom", "static", "deform", "render", "eval")
EXIT_CONFIG = 3
EXIT_STAGE = 4

DEFAULTS = {
    "input": None,
    "output": "out",
    "seed": 0,
    "trajectory": {"preset": None, "n_views": 30, "amplitude": 0.3, "z_focus": 1.0},
    "flow": {"source": "files", "kind": "uniform", "params": {}},
    "mom": {"iterations": 200, "batch_views": 30, "lr0": 0.5, "decay": 0.97},
    "gsplat": {"steps": 300, "lambda": 0.2},
    "deform": {"K": 4, "sampled_views": None, "n_sampled": 3, "steps": 100, "frames": 12,
               "loop_period": None, "train_rotation_scale": True},
    "render": {"frames": 330, "camera_schedule": "swept", "fixed_index": 0, "loop_period": 1.0, "fps": 30.0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and k != "params":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be an object")
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, pairs) -> dict:
    """Apply ``dotted.key=value`` overrides; values are JSON when they parse as JSON."""
    over: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = over
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return _merge(config, over)


def load_config(path=None, overrides=None, **direct) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    cfg = apply_overrides(cfg, overrides)
    for k, v in direct.items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not cfg["input"]:
        raise ConfigError("config needs an input directory")
    d = Path(cfg["input"])
    for name in ("image.png", "depth.pfm", "mask.pgm", "rig.json"):
        if not (d / name).exists():
            raise ConfigError(f"input file {d / name} does not exist")
    if cfg["trajectory"]["n_views"] < 1:
        raise ConfigError("trajectory.n_views must be >= 1")
    if cfg["flow"]["source"] not in ("files", "synth"):
        raise ConfigError("flow.source must be 'files' or 'synth'")
    if cfg["render"]["camera_schedule"] not in ("fixed", "swept"):
        raise ConfigError("render.camera_schedule must be 'fixed' or 'swept'")


def stage_manifest(stage: str, cfg: dict, files: list) -> dict:
    return {"stage": stage, "config_hash": config_hash(cfg), "version": __version__, "files": sorted(files)}


class Runner:
    """Runs pipeline stages against one output directory; later stages reload earlier artifacts."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output"])
        self._state: dict = {}

    # -- inputs ---------------------------------------------------------
    @property
    def inputs(self):
        if "inputs" not in self._state:
            from .geometry import cameras_along, make_trajectory
            from .pipeline import load_inputs

            inp = load_inputs(self.cfg["input"])
            tr = self.cfg["trajectory"]
            if tr["preset"]:
                traj = make_trajectory(tr["preset"], tr["n_views"], tr["amplitude"], tr["z_focus"])
                inp.cameras = cameras_along(inp.cameras[0].intrinsics, traj.poses)
                if inp.flows is not None and len(inp.flows) != len(inp.cameras):
                    inp.flows = None
            if self.cfg["flow"]["source"] == "synth":
                inp.flows = None
            self._state["inputs"] = inp
        return self._state["inputs"]

    def _dir(self, name: str) -> Path:
        from .io import ensure_dir

        return ensure_dir(self.out / name)

    def _finish(self, stage: str, d: Path) -> None:
        from .io import write_json

        files = [p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file() and p.name != "manifest.json"]
        write_json(d / "manifest.json", stage_manifest(stage, self.cfg, files))

    def _need(self, key: str, path: Path, loader, producer: str):
        if key not in self._state:
            if not path.exists():
                raise FileNotFoundError(f"{path} not found; run the {producer!r} stage first")
            self._state[key] = loader(path)
        return self._state[key]

    @property
    def lifted(self):
        if "lifted" not in self._state:
            from .pipeline import lift_and_render

            self._state["lifted"] = lift_and_render(self.inputs)
        return self._state["lifted"]

    # -- stages ---------------------------------------------------------
    def stage_views(self) -> None:
        from .io import write_pgm, write_png

        d = self._dir("views")
        for i, (v, m) in enumerate(zip(self.lifted.views, self.lifted.masks)):
            write_png(d / f"view_{i:03d}.png", v.color)
            write_pgm(d / f"view_{i:03d}_holes.pgm", v.hole_mask)
            write_pgm(d / f"view_{i:03d}_mask.pgm", m)
        self._finish("views", d)

    def stage_mom(self) -> None:
        from .io import write_json
        from .mom import MomConfig, consistency_epe, field_to_flows, write_loss_csv, write_motion_ply
        from .pipeline import lift_motion, view_flows

        m = self.cfg["mom"]
        config = MomConfig(m["iterations"], m["batch_views"], m["lr0"], m["decay"], self.cfg["seed"])
        synth = self.cfg["flow"] if self.cfg["flow"]["source"] == "synth" else None
        field = lift_motion(self.inputs, self.lifted, config, synth)
        self._state["field"] = field
        d = self._dir("mom")
        write_motion_ply(field, d / "motion.ply")
        write_loss_csv(field, d / "loss.csv")
        report = {"points": len(field), "final_loss": field.loss_history[-1][2]}
        cams = self.inputs.cameras
        if len(cams) >= 2:
            flows = view_flows(self.inputs, self.lifted, synth)
            depth, mask = self.inputs.depth, self.inputs.mask
            try:
                report["consistency_epe_input"] = consistency_epe(flows, cams, cams[0], depth, mask)
                reproj = field_to_flows(field, cams, occlusion_cloud=self.lifted.cloud)
                report["consistency_epe_reprojected"] = consistency_epe(reproj, cams, cams[0], depth, mask)
            except NoCorrespondence as exc:
                report["consistency_note"] = str(exc)
        write_json(d / "report.json", report)
        self._finish("mom", d)

    @property
    def field(self):
        from .mom import read_motion_ply

        return self._need("field", self.out / "mom" / "motion.ply", read_motion_ply, "mom")

    def stage_static(self) -> None:
        from .gsplat import write_gaussian_ply
        from .pipeline import fit_static

        g = self.cfg["gsplat"]
        static = fit_static(self.lifted, self.inputs.cameras, g["steps"], g["lambda"], self.cfg["seed"])
        self._state["static"] = static
        d = self._dir("static")
        write_gaussian_ply(static, d / "gaussians.ply")
        self._finish("static", d)

    @property
    def static(self):
        from .gsplat import read_gaussian_ply

        return self._need("static", self.out / "static" / "gaussians.ply", read_gaussian_ply, "static")

    def schedule(self):
        from .deform4d import StageSchedule

        dc = self.cfg["deform"]
        n = len(self.inputs.cameras)
        views = dc["sampled_views"] or StageSchedule.spread(n, dc["n_sampled"])
        return StageSchedule(self.cfg["gsplat"]["steps"], dc["steps"], tuple(views))

    def stage_deform(self) -> None:
        from .deform4d import write_model
        from .flow2d import write_sequence
        from .pipeline import run_stage2, video_times

        dc = self.cfg["deform"]
        schedule = self.schedule()
        run = run_stage2(self.static, self.lifted, self.inputs.cameras, self.field, schedule,
                         video_times(dc["frames"]), loop_period=dc["loop_period"], lam=self.cfg["gsplat"]["lambda"],
                         K=dc["K"], train_rotation_scale=dc["train_rotation_scale"], seed=self.cfg["seed"])
        self._state["model"] = run.model
        d = self._dir("deform")
        write_model(run.model, d / "model.bin")
        with open(d / "loss.csv", "w") as f:
            f.write("step,loss\n")
            for step, loss in run.history:
                f.write(f"{step},{loss:.10g}\n")
        for v, seq in zip(schedule.sampled_views, run.videos):
            write_sequence(seq, d / "videos" / f"view_{v:03d}", {"view": v})
        self._finish("deform", d)

    @property
    def model(self):
        from .deform4d import read_model

        return self._need("model", self.out / "deform" / "model.bin", read_model, "deform")

    def stage_render(self) -> None:
        from .deform4d import render_video
        from .flow2d import write_sequence
        from .pipeline import video_times

        rc = self.cfg["render"]
        seq = render_video(self.static, self.model, self.inputs.cameras, video_times(rc["frames"]),
                           camera_schedule=rc["camera_schedule"], fixed_index=rc["fixed_index"], fps=rc["fps"],
                           loop_period=rc["loop_period"])
        seq.frames = [np.clip(f, 0.0, 1.0) for f in seq.frames]
        d = self._dir("render")
        write_sequence(seq, d, {"camera_schedule": rc["camera_schedule"]})
        self._finish("render", d)

    def stage_eval(self) -> None:
        from .pipeline import heldout_report

        if not self.inputs.heldout_videos:
            log.info("no held-out ground truth in %s; skipping evaluation", self.cfg["input"])
            return
        report, _ = heldout_report(self.static, self.model, self.inputs)
        d = self._dir("eval")
        report.write_csv(d / "report.csv")
        report.write_json(d / "report.json")
        self._finish("eval", d)

    def run(self, stages) -> None:
        from .io import ensure_dir, write_json

        ensure_dir(self.out)
        write_json(self.out / "config.json", self.cfg)
        for stage in stages:
            log.info("stage %s", stage)
            try:
                getattr(self, f"stage_{stage}")()
            except Exception as exc:  # every failure is reported with its stage
                raise StageError(stage, exc) from exc


def stages_until(last: str) -> list:
    return list(STAGES[:STAGES.index(last) + 1])


# -- standalone evaluation -----------------------------------------------
def cmd_eval(pred_dir, gt_dir, mask=None, out_dir=None, tol: float = 1e-9):
    """Compare two frame sequences frame by frame; writes report.csv/json."""
    from .flow2d import read_flo, read_sequence
    from .io import ensure_dir, read_pgm
    from .metrics import epe, evaluate_frames

    pred, gt = read_sequence(pred_dir), read_sequence(gt_dir)
    if len(pred) != len(gt) or not np.allclose(pred.times, gt.times, atol=tol, rtol=0):
        raise ManifestMismatch(f"frame times differ between {pred_dir} and {gt_dir}")
    if pred.meta.get("view") != gt.meta.get("view"):
        raise ManifestMismatch(f"view ids differ: {pred.meta.get('view')} vs {gt.meta.get('view')}")
    if mask is None and (Path(gt_dir) / "mask.pgm").exists():
        mask = Path(gt_dir) / "mask.pgm"
    m = None if mask is None else read_pgm(mask) >= 0.5
    meta = [{"view": gt.meta.get("view", ""), "time": t} for t in gt.times]
    report = evaluate_frames(pred.frames, gt.frames, [m] * len(gt) if m is not None else None, meta)
    flo = sorted(p.name for p in Path(gt_dir).glob("flow_view*.flo"))
    pairs = [(Path(pred_dir) / n, Path(gt_dir) / n) for n in flo if (Path(pred_dir) / n).exists()]
    if pairs:
        report.epe = float(np.mean([epe(read_flo(a), read_flo(b)) for a, b in pairs]))
    out = ensure_dir(out_dir or Path(pred_dir) / "eval")
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    return report


def cmd_metrics(a, b, mask=None) -> dict:
    """PSNR/SSIM for two images, or EPE for two .flo files."""
    from .flow2d import read_flo
    from .io import read_pgm, read_png
    from .metrics import epe, psnr, ssim

    m = None if mask is None else read_pgm(mask) >= 0.5
    if str(a).endswith(".flo"):
        return {"EPE": epe(read_flo(a), read_flo(b), m)}
    x, y = read_png(a), read_png(b)
    p = psnr(x, y, m)
    return {"PSNR": "inf" if np.isinf(p) else p, "SSIM": ssim(x, y, m)}


def cmd_fixtures(scene_id: str, out_dir, seed: int = 0, frames: int = None) -> dict:
    from .fixtures import VIDEO_FRAMES, make_scene, write_scene

    return write_scene(make_scene(scene_id, seed), out_dir, frames or VIDEO_FRAMES)


# -- argument parsing ------------------------------------------------------
def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--input", help="scene directory (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set mom.iterations=100")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynscene", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=None,
                    help=f"cap on numeric worker threads (default ${THREADS_ENV} or 1)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="write a synthetic scene with ground truth")
    p.add_argument("scene", choices=("plane_wave", "two_layer", "waterfall"))
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None, help="held-out video length")

    p = sub.add_parser("run", help="run the pipeline")
    _add_config_args(p)
    p.add_argument("--stage", choices=STAGES, default="eval", help="stop after this stage")

    for name, stages, text in (("lift-motion", ("views", "mom"), "fit 3D motion only"),
                               ("train-static", ("views", "static"), "fit the static Gaussians"),
                               ("train-deform", ("deform",), "fit the temporal deformation"),
                               ("render", ("render",), "render the output video")):
        p = sub.add_parser(name, help=text)
        _add_config_args(p)
        p.set_defaults(only_stages=stages)

    p = sub.add_parser("eval", help="score a predicted frame sequence against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--mask")
    p.add_argument("--out")

    p = sub.add_parser("metrics", help="PSNR/SSIM of two PNGs or EPE of two .flo files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--mask")
    return ap


def _threads(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
    except ValueError:
        print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    with threadpool_limits(limits=threads):
        return _dispatch(args)


def _dispatch(args) -> int:
    cmd = args.command
    try:
        if cmd == "fixtures":
            files = cmd_fixtures(args.scene, args.out, args.seed, args.frames)
            print(json.dumps(files, indent=2))
            return 0
        if cmd == "eval":
            report = cmd_eval(args.pred, args.gt, args.mask, args.out)
            print(json.dumps({k: v for k, v in report.to_dict().items() if k != "frames"}, indent=2))
            return 0
        if cmd == "metrics":
            print(json.dumps(cmd_metrics(args.a, args.b, args.mask), indent=2))
            return 0
    except (DynSceneError, ValueError, OSError) as exc:
        print(f"error: [{cmd}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    try:
        cfg = load_config(args.config, args.set, input=args.input, output=args.out, seed=args.seed)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    only = getattr(args, "only_stages", None)
    stages = list(only) if only else stages_until(args.stage)
    try:
        Runner(cfg).run(stages)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return 0
