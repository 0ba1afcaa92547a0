"""Stage composition shared by the command line and the end-to-end tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deform4d import DeformationModel, StageSchedule, train_stage2
from .errors import DynSceneError, NoCoverage
from .flow2d import read_flo, read_sequence, synth_flow, synthesize_sequence
from .geometry import CameraModel, PointCloud, unproject
from .gsplat import GaussianCloud, init_from_pointcloud, optimize_static
from .io import read_pfm, read_pgm, read_png, read_rig
from .mom import MomConfig, MotionField3D, field_to_flows, optimize_motion
from .pcrender import MotionMask, fill_holes, render_motion_mask, render_view

log = logging.getLogger(__name__)


@dataclass
class SceneInputs:
    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    cameras: list
    flows: list = None
    heldout: list = field(default_factory=list)
    heldout_videos: list = field(default_factory=list)
    heldout_masks: list = field(default_factory=list)

    @property
    def input_camera(self) -> CameraModel:
        return self.cameras[0]


def video_times(n_frames: int) -> list:
    """``n_frames`` evenly spaced times covering [0, 1)."""
    if n_frames < 1:
        raise ValueError("a video needs at least one frame")
    return [j / n_frames for j in range(n_frames)]


def load_inputs(in_dir) -> SceneInputs:
    """Read a scene directory: image.png, depth.pfm, mask.pgm, rig.json and
    optional flow_view%03d.flo, heldout_rig.json, heldout_%03d/ videos."""
    d = Path(in_dir)
    for name in ("image.png", "depth.pfm", "mask.pgm", "rig.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} is missing")
    cameras = read_rig(d / "rig.json")
    flows = None
    if (d / "flow_view000.flo").exists():
        flows = [read_flo(d / f"flow_view{i:03d}.flo") for i in range(len(cameras))]
    heldout, videos, masks = [], [], []
    if (d / "heldout_rig.json").exists():
        heldout = read_rig(d / "heldout_rig.json")
        for i in range(len(heldout)):
            vd = d / f"heldout_{i:03d}"
            if (vd / "manifest.json").exists():
                videos.append(read_sequence(vd))
                masks.append(read_pgm(vd / "mask.pgm") if (vd / "mask.pgm").exists() else None)
        if videos and len(videos) != len(heldout):
            raise FileNotFoundError(f"{d}: some held-out videos are missing")
    return SceneInputs(read_png(d / "image.png"), read_pfm(d / "depth.pfm"), read_pgm(d / "mask.pgm"),
                       cameras, flows, heldout, videos, masks)


def inputs_from_scene(scene, n_frames: int = 12, loop_period: float | None = None) -> SceneInputs:
    """In-memory equivalent of writing a fixture and loading it back (without PNG quantization)."""
    from .fixtures import heldout_video

    cams = scene.cameras
    videos = [heldout_video(scene, c, n_frames, loop_period) for c in scene.heldout]
    masks = [scene.motion_mask(c) for c in scene.heldout]
    return SceneInputs(scene.image, scene.depth, scene.mask, list(cams), [scene.gt_flow(c) for c in cams],
                       list(scene.heldout), videos, masks)


@dataclass
class Lifted:
    cloud: PointCloud
    views: list          # filled RenderedView per camera
    raw_views: list      # before hole filling
    masks: list          # per-view motion masks in [0, 1]


def lift_and_render(inputs: SceneInputs) -> Lifted:
    cam0 = inputs.input_camera
    cloud = unproject(inputs.image, inputs.depth, cam0)
    raw = [render_view(cloud, c) for c in inputs.cameras]
    mask = MotionMask(inputs.mask)
    masks = [render_motion_mask(mask, inputs.depth, cam0, c).mask for c in inputs.cameras]
    return Lifted(cloud, [fill_holes(v) for v in raw], raw, masks)


def view_flows(inputs: SceneInputs, lifted: Lifted, synth: dict = None) -> list:
    """Per-view 2D flows: supplied files, or an analytic field gated by each view's mask."""
    if inputs.flows is not None:
        return inputs.flows
    if synth is None:
        raise NoCoverage("no flow files found and no synthetic flow configured")
    return [synth_flow(synth["kind"], synth.get("params", {}), MotionMask(m)) for m in lifted.masks]


def motion_init(field: MotionField3D, n: int) -> np.ndarray:
    """Per-Gaussian F3D: the optimized motion on animated points, zero elsewhere."""
    out = np.zeros((n, 3))
    out[field.point_index] = field.motion
    return out


def stage2_videos(lifted: Lifted, cameras: list, field: MotionField3D, sampled: tuple,
                  times: list, loop_period: float | None = None) -> list:
    """Training videos from the sampled views, animated by the re-projected 3D motion."""
    cams = [cameras[i] for i in sampled]
    flows = field_to_flows(field, cams, occlusion_cloud=lifted.cloud)
    return [synthesize_sequence(lifted.views[i].color, f, times, loop_period) for i, f in zip(sampled, flows)]


@dataclass
class Stage2Run:
    model: DeformationModel
    videos: list
    history: list
    seconds: float


def run_stage2(static: GaussianCloud, lifted: Lifted, cameras: list, field: MotionField3D,
               schedule: StageSchedule, times: list, *, loop_period: float | None = None, lam: float = 0.2,
               K: int = 4, use_motion_init: bool = True, train_rotation_scale: bool = True,
               lrs=None, seed: int = 0) -> Stage2Run:
    """Synthesize the sampled-view videos and fit the deformation; only sampled views are touched."""
    import time

    schedule.validate(len(cameras))
    start = time.perf_counter()
    videos = stage2_videos(lifted, cameras, field, schedule.sampled_views, times, loop_period)
    init = motion_init(field, len(static)) if use_motion_init else None
    model = DeformationModel.zeros(len(static), K, init, train_rotation_scale=train_rotation_scale)
    history = []
    model = train_stage2(static, model, videos, [cameras[i] for i in schedule.sampled_views], schedule, lam,
                         lrs=lrs, seed=seed, history=history)
    return Stage2Run(model, videos, history, time.perf_counter() - start)


def fit_static(lifted: Lifted, cameras: list, steps: int, lam: float = 0.2, seed: int = 0) -> GaussianCloud:
    init = init_from_pointcloud(lifted.cloud)
    return optimize_static(init, list(zip(lifted.views, cameras)), steps, lam, seed=seed)


def lift_motion(inputs: SceneInputs, lifted: Lifted, config: MomConfig, synth: dict = None) -> MotionField3D:
    flows = view_flows(inputs, lifted, synth)
    return optimize_motion(lifted.cloud, inputs.mask, flows, inputs.cameras, config)


class StageError(DynSceneError):
    """A module error tagged with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def heldout_report(static: GaussianCloud, model: DeformationModel, inputs: SceneInputs):
    """Score renders of the deformed cloud against every held-out ground-truth video."""
    from .deform4d import deform
    from .gsplat import rasterize
    from .metrics import evaluate_frames

    preds, gts, masks, meta = [], [], [], []
    for v, (cam, seq, m) in enumerate(zip(inputs.heldout, inputs.heldout_videos, inputs.heldout_masks)):
        for t, frame in zip(seq.times, seq.frames):
            preds.append(np.clip(rasterize(deform(static, model, t), cam)[0], 0.0, 1.0))
            gts.append(frame)
            masks.append(None if m is None else np.asarray(m) >= 0.5)
            meta.append({"view": v, "time": float(t)})
    if not preds:
        return None, []
    return evaluate_frames(preds, gts, masks, meta), preds


def config_hash(config: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
