"""Time-conditioned deformation of a Gaussian cloud: explicit 3D motion plus
learned residuals over a fixed temporal basis, stage-2 training and video rendering.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyVideo, NonFiniteLoss, SizeMismatch, TruncatedFile
from .flow2d import FrameSequence
from .geometry import CameraIntrinsics, CameraModel, Trajectory
from .gsplat import (LOG_SCALE_MAX, LOG_SCALE_MIN, Adam, GaussianCloud, backward_rasterize,
                     photometric_loss, rasterize, scene_extent)

log = logging.getLogger(__name__)

BASIS_ID = "sin-cos-quad-cubic"
K_DEFAULT = 4
N_CH = 10  # 3 position, 4 rotation, 3 log-scale
PERIODIC = (0, 1)


def basis(t: float, K: int = K_DEFAULT) -> np.ndarray:
    """[sin 2πt, 1 − cos 2πt, t², t³(1 − t)][:K]; every member is 0 at t = 0."""
    if not 1 <= K <= 4:
        raise ValueError("K must lie in 1..4")
    t = float(t)
    full = np.array([np.sin(2 * np.pi * t), 1.0 - np.cos(2 * np.pi * t), t * t, t ** 3 * (1.0 - t)])
    if t == 0.0:
        full[:] = 0.0  # guard against -0.0 and rounding in the trig terms
    return full[:K]


@dataclass
class DeformationModel:
    motion_init: np.ndarray
    residual_coeffs: np.ndarray
    basis_id: str = BASIS_ID
    train_rotation_scale: bool = True

    def __post_init__(self):
        self.motion_init = np.array(self.motion_init, dtype=np.float64).reshape(-1, 3)
        n = len(self.motion_init)
        c = np.array(self.residual_coeffs, dtype=np.float64)
        if c.ndim != 3 or c.shape[0] != n or c.shape[2] != N_CH:
            raise SizeMismatch(f"coefficients {c.shape} do not match {n} Gaussians x K x {N_CH}")
        if not np.all(np.isfinite(c)):
            raise ValueError("residual coefficients must be finite")
        self.residual_coeffs = c

    @classmethod
    def zeros(cls, n: int, K: int = K_DEFAULT, motion_init=None, **kw) -> "DeformationModel":
        motion = np.zeros((n, 3)) if motion_init is None else motion_init
        return cls(motion, np.zeros((n, K, N_CH)), **kw)

    @property
    def K(self) -> int:
        return self.residual_coeffs.shape[1]

    @property
    def N(self) -> int:
        return len(self.motion_init)

    def copy(self) -> "DeformationModel":
        return DeformationModel(self.motion_init.copy(), self.residual_coeffs.copy(), self.basis_id,
                                self.train_rotation_scale)

    def residuals(self, t: float) -> np.ndarray:
        return np.einsum("k,nkc->nc", basis(t, self.K), self.residual_coeffs)


@dataclass
class StageSchedule:
    stage1_steps: int = 300
    stage2_steps: int = 200
    sampled_views: tuple = (0, 10, 20)

    def __post_init__(self):
        self.sampled_views = tuple(int(v) for v in self.sampled_views)
        if not self.sampled_views:
            raise ValueError("stage 2 needs at least one sampled view")
        if len(set(self.sampled_views)) != len(self.sampled_views):
            raise ValueError("sampled views must be distinct")

    def validate(self, n_views: int) -> None:
        bad = [v for v in self.sampled_views if not 0 <= v < n_views]
        if bad:
            raise ValueError(f"sampled views {bad} outside 0..{n_views - 1}")

    @staticmethod
    def spread(n_views: int, count: int = 3) -> tuple:
        """``count`` views spaced evenly over the rig, always including view 0."""
        count = min(count, n_views)
        return tuple(int(round(i * n_views / count)) % n_views for i in range(count))


@dataclass
class _Deformed:
    cloud: GaussianCloud
    u_norm: np.ndarray       # |r + Δr| per Gaussian (1 where Δr is exactly zero and r is kept)
    scale_free: np.ndarray   # log-scale not clamped


def _deform(cloud: GaussianCloud, model: DeformationModel, t: float) -> _Deformed:
    if model.N != len(cloud):
        raise SizeMismatch(f"model has {model.N} Gaussians, cloud has {len(cloud)}")
    D = model.residuals(t)
    means = cloud.means + t * model.motion_init + D[:, :3]
    quats = cloud.quats.copy()
    scales = cloud.log_scales.copy()
    u_norm = np.ones(len(cloud))
    free = np.ones((len(cloud), 3), dtype=bool)
    if model.train_rotation_scale:
        dr = D[:, 3:7]
        moved = np.any(dr != 0.0, axis=1)
        if moved.any():
            u = cloud.quats[moved] + dr[moved]
            u_norm[moved] = np.linalg.norm(u, axis=1)
            quats[moved] = u / u_norm[moved, None]
        raw = cloud.log_scales + D[:, 7:10]
        scales = np.clip(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)
        free = scales == raw
    out = GaussianCloud(means, quats, scales, cloud.opacity_logits, cloud.colors)
    return _Deformed(out, u_norm, free)


def deform(cloud: GaussianCloud, model: DeformationModel, t: float) -> GaussianCloud:
    """Cloud at time ``t``: x + t·F + Δx(t), normalize(r + Δr(t)), s + Δs(t).

    At t = 0 the basis vanishes and the input is returned bit-exactly.
    """
    return _deform(cloud, model, t).cloud


def coeff_gradient(model: DeformationModel, t: float, deformed: _Deformed, grads) -> np.ndarray:
    """Chain per-Gaussian gradients at time ``t`` back to the residual coefficients."""
    b = basis(t, model.K)
    g = np.zeros((model.N, N_CH))
    g[:, :3] = grads.means
    if model.train_rotation_scale:
        # rasterize already projects onto the tangent of its (unit) input
        g[:, 3:7] = grads.quats / deformed.u_norm[:, None]
        g[:, 7:10] = grads.log_scales * deformed.scale_free
    return b[None, :, None] * g[:, None, :]


LR_FINAL_FRACTION = 0.01


def residual_lrs(extent: float) -> np.ndarray:
    """Initial Adam step sizes per coefficient channel, equal to the static position/rotation/scale rates."""
    return np.array([1.6e-4 * extent] * 3 + [1e-3] * 4 + [5e-3] * 3)


def lr_schedule(step: int, steps: int) -> float:
    """Exponential decay from 1 to LR_FINAL_FRACTION over the run."""
    return LR_FINAL_FRACTION ** (step / max(steps - 1, 1))


def _frame_loss(cloud, model, t, frame, camera, lam, valid=None, with_grad=True):
    d = _deform(cloud, model, t)
    img, _, ctx = rasterize(d.cloud, camera, return_context=True)
    loss, g_img = photometric_loss(img, frame, valid, lam)
    if not with_grad:
        return loss, None
    grads = backward_rasterize(d.cloud, camera, g_img, context=ctx)
    return loss, coeff_gradient(model, t, d, grads)


def _valid(seq: FrameSequence, j: int):
    return None if seq.hole_masks is None else ~np.asarray(seq.hole_masks[j], dtype=bool)


def sequence_loss(cloud, model, videos, cameras, lam: float = 0.2) -> float:
    """Mean photometric loss over every frame of every supplied video, synthesized holes excluded."""
    losses = [_frame_loss(cloud, model, t, f, cam, lam, _valid(seq, j), with_grad=False)[0]
              for seq, cam in zip(videos, cameras) for j, (t, f) in enumerate(zip(seq.times, seq.frames))]
    return float(np.mean(losses))


def train_stage2(static_cloud: GaussianCloud, model: DeformationModel, videos: Sequence[FrameSequence],
                 cameras: Sequence[CameraModel], schedule: StageSchedule, lam: float = 0.2, *,
                 lrs=None, seed: int = 0, history: list = None) -> DeformationModel:
    """Fit the residual coefficients to videos seen from the sampled views.

    ``videos`` and ``cameras`` hold one entry per ``schedule.sampled_views``
    and nothing else. Pixels flagged in a video's hole masks are not
    supervised. Each step draws one frame time and averages the
    coefficient gradient over all sampled views at that time, so a step
    costs one render per sampled view. The static cloud and motion_init stay
    fixed. ``history`` (if given) receives (step, loss) rows, with the
    initial and final full-sequence losses tagged ``"initial"``/``"final"``.
    """
    if len(videos) != len(schedule.sampled_views) or len(cameras) != len(videos):
        raise SizeMismatch("need exactly one video and one camera per sampled view")
    if any(len(v) == 0 for v in videos):
        raise EmptyVideo("a sampled-view video has no frames")
    times = list(videos[0].times)
    if any(list(v.times) != times for v in videos):
        raise ValueError("all stage-2 videos must share one time grid")
    if model.N != len(static_cloud):
        raise SizeMismatch(f"model has {model.N} Gaussians, cloud has {len(static_cloud)}")
    out = model.copy()
    lr = residual_lrs(scene_extent(static_cloud.means)) if lrs is None else np.asarray(lrs, dtype=np.float64)
    if not out.train_rotation_scale:
        lr = lr.copy()
        lr[3:] = 0.0
    params = {"coeffs": out.residual_coeffs}
    opt = Adam(params, {"coeffs": lr})
    rng = np.random.default_rng(seed)
    initial = sequence_loss(static_cloud, model, videos, cameras, lam)
    if history is not None:
        history.append(("initial", initial))
    for step in range(schedule.stage2_steps):
        j = int(rng.integers(len(times)))
        t = times[j]
        g = np.zeros_like(out.residual_coeffs)
        losses = []
        for seq, cam in zip(videos, cameras):
            loss, gi = _frame_loss(static_cloud, out, t, seq.frames[j], cam, lam, _valid(seq, j))
            losses.append(loss)
            g += gi
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise NonFiniteLoss(f"stage-2 loss became {mean_loss} at step {step}")
        opt.step(params, {"coeffs": g / len(videos)}, lr_schedule(step, schedule.stage2_steps))
        if history is not None:
            history.append((step, mean_loss))
    final = sequence_loss(static_cloud, out, videos, cameras, lam)
    if history is not None:
        history.append(("final", final))
    if not np.isfinite(final):
        raise NonFiniteLoss(f"final stage-2 loss is {final}")
    log.info("stage 2: loss %.6g -> %.6g over %d steps on %d views", initial, final,
             schedule.stage2_steps, len(videos))
    if final > initial:
        log.warning("stage 2 did not improve (%.6g > %.6g); keeping the initial model", final, initial)
        return model.copy()
    return out


def _schedule_cameras(cameras: list, n_frames: int, camera_schedule: str, fixed_index: int) -> list:
    if camera_schedule == "fixed":
        return [cameras[fixed_index]] * n_frames
    if camera_schedule == "swept":
        if len(cameras) == n_frames:
            return list(cameras)
        last = len(cameras) - 1
        return [cameras[int(round(j * last / max(n_frames - 1, 1)))] for j in range(n_frames)]
    raise ValueError(f"unknown camera schedule {camera_schedule!r}; use 'fixed' or 'swept'")


def render_video(static_cloud: GaussianCloud, model: DeformationModel, trajectory, times: Sequence[float],
                 intrinsics: CameraIntrinsics = None, camera_schedule: str = "swept", fixed_index: int = 0,
                 fps: float = 30.0, loop_period: float = 1.0) -> FrameSequence:
    """Render the deformed cloud at each time.

    ``trajectory`` is a Trajectory (then ``intrinsics`` is required) or a list
    of cameras. ``"swept"`` pairs frame j with pose j (resampled by nearest
    index when the counts differ); ``"fixed"`` holds pose ``fixed_index``.
    """
    if isinstance(trajectory, Trajectory):
        if intrinsics is None:
            raise ValueError("intrinsics are required with a Trajectory")
        cameras = [CameraModel(intrinsics, p) for p in trajectory.poses]
    else:
        cameras = list(trajectory)
    if not cameras:
        raise ValueError("render_video needs at least one camera")
    times = [float(t) for t in times]
    if not times:
        raise EmptyVideo("no frame times requested")
    cams = _schedule_cameras(cameras, len(times), camera_schedule, fixed_index)
    frames = [rasterize(deform(static_cloud, model, t), cam)[0] for t, cam in zip(times, cams)]
    return FrameSequence(frames, times, {"fps": fps, "loop_period": loop_period,
                                         "camera_schedule": camera_schedule})


def write_model(model: DeformationModel, path) -> None:
    """Little-endian u64 header length, JSON header, then float64 motion_init and coefficients."""
    header = json.dumps({"K": model.K, "basis_id": model.basis_id, "N": model.N,
                         "train_rotation_scale": model.train_rotation_scale}).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(model.motion_init.astype("<f8").tobytes())
        f.write(model.residual_coeffs.astype("<f8").tobytes())


def read_model(path) -> DeformationModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: missing header length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise TruncatedFile(f"{path}: header cut short")
    header = json.loads(raw[8:8 + hlen])
    if header.get("basis_id") != BASIS_ID:
        raise ValueError(f"{path}: unsupported basis {header.get('basis_id')!r}")
    n, K = int(header["N"]), int(header["K"])
    need = 8 * (n * 3 + n * K * N_CH)
    body = raw[8 + hlen:]
    if len(body) < need:
        raise TruncatedFile(f"{path}: expected {need} data bytes, found {len(body)}")
    data = np.frombuffer(body[:need], dtype="<f8")
    return DeformationModel(data[:n * 3].reshape(n, 3), data[n * 3:].reshape(n, K, N_CH),
                            header["basis_id"], bool(header.get("train_rotation_scale", True)))
