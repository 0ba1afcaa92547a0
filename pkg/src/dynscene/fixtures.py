"""Synthetic scenes with analytic geometry and planted 3D motion.

Every surface is planar, so each pixel of any camera can be ray cast exactly;
ground-truth flows are the projections of the planted motion of the surface
point seen at that pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .flow2d import FlowField2D, synthesize_sequence, write_flo, write_sequence
from .geometry import (CameraIntrinsics, CameraModel, CameraPose, PointCloud, make_trajectory, project,
                       unproject)
from .io import ensure_dir, write_json, write_pfm, write_pgm, write_png, write_rig
from .mom import MotionField3D, select_animated, write_motion_ply
from .pcrender import MotionMask

SCENES = ("plane_wave", "two_layer", "waterfall")


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    inside: Callable = None  # world-space extent predicate, None = unbounded


@dataclass
class Scene:
    name: str
    intrinsics: CameraIntrinsics
    planes: list
    texture: Callable          # world (N, 3) -> colors (N, 3)
    motion: Callable           # world (N, 3) -> F3D (N, 3)
    animated: Callable         # world (N, 3) -> bool
    cameras: list
    heldout: list = field(default_factory=list)
    image: np.ndarray = None
    depth: np.ndarray = None
    mask: np.ndarray = None

    @property
    def input_camera(self) -> CameraModel:
        return CameraModel(self.intrinsics, CameraPose.identity())

    def raycast(self, cam: CameraModel):
        """World hit points (H, W, 3), camera depth (H, W) and surface id (-1 = miss)."""
        k = cam.intrinsics
        H, W = cam.shape
        v, u = np.mgrid[0:H, 0:W].astype(np.float64)
        dirs = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
        R, c = cam.pose.rotation, cam.pose.center
        wd = dirs @ R  # camera ray with unit z, rotated into the world
        best = np.full(len(wd), np.inf)
        sid = np.full(len(wd), -1)
        hits = np.zeros((len(wd), 3))
        for i, pl in enumerate(self.planes):
            denom = wd @ pl.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = ((pl.point - c) @ pl.normal) / denom
            X = c + s[:, None] * wd
            ok = np.isfinite(s) & (s > 1e-6)
            if pl.inside is not None:
                ok &= pl.inside(X)
            closer = ok & (s < best)
            best[closer] = s[closer]
            sid[closer] = i
            hits[closer] = X[closer]
        depth = np.where(sid >= 0, best, np.nan)
        return hits.reshape(H, W, 3), depth.reshape(H, W), sid.reshape(H, W)

    def cloud(self) -> PointCloud:
        return unproject(self.image, self.depth, self.input_camera)

    def gt_field(self) -> MotionField3D:
        cloud = self.cloud()
        idx = select_animated(cloud, self.mask)
        base = cloud.positions[idx]
        return MotionField3D(base, base + self.motion(base), idx)

    def render_gt(self, cam: CameraModel) -> np.ndarray:
        """Exact t=0 image from ``cam`` (miss pixels black)."""
        X, depth, sid = self.raycast(cam)
        img = self.texture(X.reshape(-1, 3)).reshape(X.shape)
        img[sid < 0] = 0.0
        return img

    def visible_in_input(self, X: np.ndarray) -> np.ndarray:
        """Surface points that the input view sees, i.e. that exist in the lifted cloud."""
        cam0 = self.input_camera
        H, W = cam0.shape
        pix, z = project(X, cam0)
        inside = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] <= W - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= H - 1)
        return inside & self._unoccluded(X, cam0)

    def _unoccluded(self, X, cam0):
        c = cam0.pose.center
        d = X.reshape(-1, 3) - c
        clear = np.ones(len(d), dtype=bool)
        for pl in self.planes:
            denom = d @ pl.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = ((pl.point - c) @ pl.normal) / denom
            P = c + s[:, None] * d
            hit = np.isfinite(s) & (s > 1e-9) & (s < 1 - 1e-9)
            if pl.inside is not None:
                hit &= pl.inside(P)
            clear &= ~hit
        return clear.reshape(X.shape[:-1])

    def gt_flow(self, cam: CameraModel, animated_only: bool = False) -> FlowField2D:
        """Projected planted motion at every pixel whose surface point is in the cloud."""
        X, depth, sid = self.raycast(cam)
        H, W = cam.shape
        Xf = X.reshape(-1, 3)
        hit = sid.reshape(-1) >= 0
        valid = hit.copy()
        valid[hit] = self.visible_in_input(Xf[hit])
        F = np.zeros_like(Xf)
        F[valid] = self.motion(Xf[valid])
        if animated_only:
            F[valid & ~self.animated(Xf)] = 0.0
        start, _ = project(Xf[valid], cam)
        end, _ = project(Xf[valid] + F[valid], cam)
        uv = np.zeros((H * W, 2))
        uv[valid] = end - start
        uv = uv.reshape(H, W, 2)
        return FlowField2D(uv[..., 0], uv[..., 1], valid.reshape(H, W))

    def motion_mask(self, cam: CameraModel) -> np.ndarray:
        X, depth, sid = self.raycast(cam)
        m = self.animated(X.reshape(-1, 3)).reshape(cam.shape) & (sid >= 0)
        return m.astype(np.float64)


def _finish(scene: Scene) -> Scene:
    cam0 = scene.input_camera
    X, depth, sid = scene.raycast(cam0)
    scene.depth = depth
    scene.image = np.clip(scene.texture(X.reshape(-1, 3)).reshape(X.shape), 0.0, 1.0)
    scene.mask = scene.animated(X.reshape(-1, 3)).reshape(cam0.shape).astype(np.float64)
    return scene


def _texture(seed: int, base_color, streak_axis=None, streak_color=None, region=None):
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(1.5, 6.0, size=(4, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(4, 3))
    base_color = np.asarray(base_color, dtype=np.float64)

    def tex(X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        out = np.tile(base_color, (len(X), 1))
        for (fx, fy), ph in zip(freqs, phases):
            out += 0.08 * np.sin(fx * X[:, :1] + fy * X[:, 1:2] + ph)
        if streak_axis is not None:
            m = region(X)
            s = 0.5 + 0.5 * np.sin(9.0 * X[:, streak_axis] + 0.6 * np.sin(3.0 * X[:, 1 - streak_axis]))
            water = np.asarray(streak_color) * (0.55 + 0.45 * s[:, None])
            out[m] = water[m]
        return np.clip(out, 0.0, 1.0)

    return tex


def plane_wave(seed: int = 0) -> Scene:
    """Tilted water plane whose lower part drifts with a smooth, wavy in-plane current."""
    k = CameraIntrinsics.default(48, 48)
    plane = Plane(np.array([0.0, 0.0, 3.0]), np.array([0.0, -0.3, 1.0]) / np.hypot(0.3, 1.0))
    water = lambda X: (X[:, 1] > 0.05) & (X[:, 1] < 1.15) & (np.abs(X[:, 0]) < 1.15)

    def motion(X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        F = np.zeros_like(X)
        F[:, 0] = 0.06 + 0.02 * np.sin(2 * np.pi * X[:, 0] / 2.4 + 0.3)
        F[:, 1] = 0.03 * np.cos(2 * np.pi * X[:, 1] / 2.8 + 0.5)
        F[:, 2] = 0.3 * F[:, 1]  # keeps the current on the tilted surface
        return F

    traj = make_trajectory("circular", 8, 0.5, z_focus=3.0)
    return _finish(Scene("plane_wave", k, [plane], _texture(seed, (0.2, 0.35, 0.55)), motion, water,
                         [CameraModel(k, p) for p in traj.poses]))


def two_layer(seed: int = 0) -> Scene:
    """Static card at depth 2 in front of a drifting backdrop at depth 5."""
    k = CameraIntrinsics.default(48, 48)
    fg = Plane(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 1.0]),
               lambda X: (np.abs(X[:, 0]) <= 0.4) & (np.abs(X[:, 1]) <= 0.4))
    bg = Plane(np.array([0.0, 0.0, 5.0]), np.array([0.0, 0.0, 1.0]))
    card_tex = _texture(seed + 1, (0.7, 0.5, 0.3))
    sky_tex = _texture(seed, (0.45, 0.6, 0.85))

    def tex(X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        return np.where((X[:, 2] < 3.5)[:, None], card_tex(X), sky_tex(X))

    animated = lambda X: np.asarray(X)[:, 2] > 3.5

    def motion(X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        F = np.zeros_like(X)
        F[X[:, 2] > 3.5, 0] = 0.12
        return F

    traj = make_trajectory("lateral", 8, 0.2)
    return _finish(Scene("two_layer", k, [fg, bg], tex, motion, animated,
                         [CameraModel(k, p) for p in traj.poses]))


def waterfall(seed: int = 0, n_views: int = 30, size: int = 32) -> Scene:
    """Rock face with a band of water falling at constant speed."""
    k = CameraIntrinsics.default(size, size)
    plane = Plane(np.array([0.0, 0.0, 4.0]), np.array([0.0, 0.0, 1.0]))
    band = lambda X: (np.abs(np.asarray(X)[:, 0] + 0.1) < 0.55) & (np.asarray(X)[:, 1] > -1.6)
    tex = _texture(seed, (0.45, 0.38, 0.3), streak_axis=1, streak_color=(0.75, 0.85, 0.95), region=band)

    def motion(X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        F = np.zeros_like(X)
        F[:, 1] = 0.5
        return F

    traj = make_trajectory("lateral", n_views, 1.0)
    held = [CameraPose(np.eye(3), np.array([x, y, 0.0])) for x, y in
            ((-0.22, 0.05), (-0.07, -0.06), (0.09, 0.04), (0.24, -0.05))]
    return _finish(Scene("waterfall", k, [plane], tex, motion, band,
                         [CameraModel(k, p) for p in traj.poses], [CameraModel(k, p) for p in held]))


def make_scene(scene_id: str, seed: int = 0) -> Scene:
    builders = {"plane_wave": plane_wave, "two_layer": two_layer, "waterfall": waterfall}
    if scene_id not in builders:
        raise KeyError(f"unknown scene {scene_id!r}; choose from {SCENES}")
    return builders[scene_id](seed)


VIDEO_FRAMES = 12


def heldout_times(n_frames: int = VIDEO_FRAMES) -> list:
    return [j / n_frames for j in range(n_frames)]


def heldout_video(scene: Scene, cam: CameraModel, n_frames: int = VIDEO_FRAMES, loop_period=None):
    """Ground-truth video from ``cam``: the exact still advected by the planted motion."""
    return synthesize_sequence(scene.render_gt(cam), scene.gt_flow(cam, animated_only=True),
                               heldout_times(n_frames), loop_period)


def write_scene(scene: Scene, out_dir, n_frames: int = VIDEO_FRAMES, loop_period=None) -> dict:
    """Write image/depth/mask/rig/GT motion/GT flows and held-out videos; returns the file map."""
    out = ensure_dir(out_dir)
    files = {"image": "image.png", "depth": "depth.pfm", "mask": "mask.pgm", "rig": "rig.json",
             "gt_motion": "gt_motion.ply"}
    write_png(out / files["image"], scene.image)
    write_pfm(out / files["depth"], scene.depth)
    write_pgm(out / files["mask"], scene.mask)
    write_rig(out / files["rig"], scene.intrinsics, [c.pose for c in scene.cameras])
    write_motion_ply(scene.gt_field(), out / files["gt_motion"])
    for i, cam in enumerate(scene.cameras):
        write_flo(scene.gt_flow(cam), out / f"flow_view{i:03d}.flo")
    if scene.heldout:
        files["heldout_rig"] = "heldout_rig.json"
        write_rig(out / files["heldout_rig"], scene.intrinsics, [c.pose for c in scene.heldout])
        for i, cam in enumerate(scene.heldout):
            d = write_sequence(heldout_video(scene, cam, n_frames, loop_period), out / f"heldout_{i:03d}",
                               {"view": i})
            write_pgm(d / "mask.pgm", scene.motion_mask(cam))
    write_json(out / "scene.json", {"scene": scene.name, "files": files, "n_views": len(scene.cameras),
                                    "heldout_frames": n_frames if scene.heldout else 0,
                                    "loop_period": loop_period})
    return files
