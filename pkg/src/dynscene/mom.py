"""3D motion optimization: fit one 3D displacement per animated point so its
projections agree with every view's 2D flow (L1 reprojection, plain SGD).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from .errors import DimensionMismatch, NoCorrespondence, NoCoverage, NonFiniteLoss
from .flow2d import FlowField2D, bilinear_sample
from .geometry import (CameraModel, PointCloud, Z_NEAR, project, projection_jacobians,
                       unproject)
from .io import read_ply, write_ply
from .pcrender import MotionMask, render_view

log = logging.getLogger(__name__)


@dataclass
class MomConfig:
    iterations: int = 200
    batch_views: int = 30
    lr0: float = 0.5
    decay: float = 0.97
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must lie in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_views < 1:
            raise ValueError("batch_views must be >= 1")


@dataclass
class MotionField3D:
    """Animated points: frozen ``base`` positions and learnable ``displaced`` ones."""

    base: np.ndarray
    displaced: np.ndarray
    point_index: np.ndarray
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        base = np.array(self.base, dtype=np.float64).reshape(-1, 3)
        base.setflags(write=False)
        self.base = base
        self.displaced = np.array(self.displaced, dtype=np.float64).reshape(-1, 3)
        self.point_index = np.asarray(self.point_index, dtype=np.int64).reshape(-1)
        if not (len(self.base) == len(self.displaced) == len(self.point_index)):
            raise DimensionMismatch("base, displaced and point_index lengths differ")
        if not np.all(np.isfinite(self.base)):
            raise ValueError("non-finite base positions")

    @classmethod
    def at_rest(cls, base, point_index) -> "MotionField3D":
        return cls(base, np.array(base, dtype=np.float64), point_index)

    @property
    def motion(self) -> np.ndarray:
        """F3D = displaced - base."""
        return self.displaced - self.base

    def __len__(self) -> int:
        return len(self.base)


class SparseFlow(NamedTuple):
    start: np.ndarray         # (M, 2) pixel of the base point
    displacement: np.ndarray  # (M, 2)
    index: np.ndarray         # (M,) rows of the field that survived
    dropped: np.ndarray       # rows failing the depth test


def project_motion(field: MotionField3D, camera: CameraModel, z_near: float = Z_NEAR) -> SparseFlow:
    start, zs = project(field.base, camera)
    end, ze = project(field.displaced, camera)
    ok = (zs > z_near) & (ze > z_near)
    idx = np.nonzero(ok)[0]
    return SparseFlow(start[ok], end[ok] - start[ok], idx, np.nonzero(~ok)[0])


def _view_terms(field: MotionField3D, displaced: np.ndarray, flow: FlowField2D, camera: CameraModel):
    """Sum of L1 residuals, their gradient wrt ``displaced`` and the pair count for one view."""
    start, zs = project(field.base, camera)
    end, ze = project(displaced, camera)
    target, ok = bilinear_sample(flow.stack(), start, flow.valid_mask)
    ok &= (zs > Z_NEAR) & (ze > Z_NEAR)
    n = int(ok.sum())
    grad = np.zeros_like(displaced)
    if n == 0:
        return 0.0, grad, 0
    res = target[ok] - (end[ok] - start[ok])
    J = projection_jacobians(displaced[ok], camera)
    # d|F - (end - start)| / d end = -sign(residual)
    grad[ok] = -np.einsum("nk,nkj->nj", np.sign(res), J)
    return float(np.abs(res).sum()), grad, n


def mom_loss(field: MotionField3D, flows: Sequence[FlowField2D], cameras: Sequence[CameraModel],
             displaced: np.ndarray = None):
    """Mean L1 flow residual over contributing (view, point) pairs and its gradient.

    Flow is sampled bilinearly at each point's base projection; pairs whose
    sample leaves the view or touches an invalid pixel do not contribute.
    """
    if len(flows) != len(cameras) or not flows:
        raise DimensionMismatch("need one flow per camera and at least one view")
    disp = field.displaced if displaced is None else displaced
    total, count = 0.0, 0
    grad = np.zeros_like(disp)
    for flow, cam in zip(flows, cameras):
        s, g, n = _view_terms(field, disp, flow, cam)
        total += s
        grad += g
        count += n
    if count == 0:
        raise NoCoverage("no (view, point) pair lands on a valid flow pixel")
    return total / count, grad / count


def select_animated(cloud: PointCloud, mask) -> np.ndarray:
    m = mask.binary() if isinstance(mask, MotionMask) else np.asarray(mask, dtype=np.float64) >= 0.5
    u, v = cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]
    return np.nonzero(m[v, u])[0]


def _batch(rng: np.random.Generator, n_views: int, size: int) -> np.ndarray:
    if size == n_views:
        return np.arange(n_views)
    if size < n_views:
        return np.sort(rng.choice(n_views, size=size, replace=False))
    return np.sort(rng.integers(0, n_views, size=size))


def optimize_motion(cloud: PointCloud, mask, flows: Sequence[FlowField2D], cameras: Sequence[CameraModel],
                    config: MomConfig = None) -> MotionField3D:
    """Fit F3D by SGD over random view batches with an exponentially decayed step.

    The history row for iteration k holds the step size and the all-view loss
    of the iterate before step k; a final row holds the loss after the last
    step. The lowest-loss iterate is returned.
    """
    config = config or MomConfig()
    if len(flows) != len(cameras):
        raise DimensionMismatch("flows and cameras are not aligned")
    idx = select_animated(cloud, mask)
    if len(idx) == 0:
        raise NoCoverage("motion mask selects no point")
    field = MotionField3D.at_rest(cloud.positions[idx], idx)
    rng = np.random.default_rng(config.seed)
    V = len(cameras)
    disp = field.displaced.copy()
    best_loss, best = np.inf, disp.copy()
    history = []
    for k in range(config.iterations):
        lr = config.lr0 * config.decay ** k
        full, _ = mom_loss(field, flows, cameras, disp)
        if not np.isfinite(full):
            raise NonFiniteLoss(f"loss became {full} at iteration {k}")
        history.append((k, lr, full))
        if full < best_loss:
            best_loss, best = full, disp.copy()
        views = _batch(rng, V, config.batch_views)
        _, g = mom_loss(field, [flows[i] for i in views], [cameras[i] for i in views], disp)
        disp = disp - lr * g
    final, _ = mom_loss(field, flows, cameras, disp)
    if not np.isfinite(final):
        raise NonFiniteLoss(f"final loss is {final}")
    history.append((config.iterations, float("nan"), final))
    if final < best_loss:
        best_loss, best = final, disp
    log.info("motion fit: loss %.6g -> %.6g over %d iterations", history[0][2], best_loss, config.iterations)
    field.displaced = best
    field.loss_history = history
    return field


def field_to_flows(field: MotionField3D, cameras: Sequence[CameraModel], occlusion_cloud: PointCloud = None):
    """Dense per-view flows re-projected from a motion field.

    Each view's sparse point displacements are linearly interpolated over the
    triangulated projected starts; pixels outside their hull are invalid.
    The displaced points' camera depths ride along as ``end_depth``
    (interpolated in inverse depth). When ``occlusion_cloud`` is given,
    points hidden behind it are ignored.
    """
    out = []
    for cam in cameras:
        sf = project_motion(field, cam)
        start, disp = sf.start, sf.displacement
        _, z_end = project(field.displaced[sf.index], cam)
        if occlusion_cloud is not None and len(start):
            visible = _visible(field.base[sf.index], occlusion_cloud, cam)
            start, disp, z_end = start[visible], disp[visible], z_end[visible]
        H, W = cam.shape
        if len(start) < 3:
            out.append(FlowField2D(np.zeros((H, W)), np.zeros((H, W)), np.zeros((H, W), dtype=bool)))
            continue
        interp = LinearNDInterpolator(start, np.column_stack([disp, 1.0 / z_end]))
        vv, uu = np.mgrid[0:H, 0:W]
        vals = interp(np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)).reshape(H, W, 3)
        valid = np.all(np.isfinite(vals), axis=2) & (vals[..., 2] > 0)
        vals[~valid] = 1.0
        out.append(FlowField2D(vals[..., 0], vals[..., 1], valid, 1.0 / vals[..., 2]))
    return out


def _zbuffer(cloud: PointCloud, cam: CameraModel) -> np.ndarray:
    return render_view(PointCloud(cloud.positions, np.zeros((len(cloud), 1)), cloud.source_pixel),
                       cam, splat_radius=1).depth


def _visible(points: np.ndarray, cloud: PointCloud, cam: CameraModel, tol: float = 0.01,
             zbuf: np.ndarray = None) -> np.ndarray:
    """Z-buffer test: a point is visible unless the rendered depth is >tol closer."""
    if zbuf is None:
        zbuf = _zbuffer(cloud, cam)
    pix, z = project(points, cam)
    H, W = cam.shape
    u = np.clip(np.floor(pix[:, 0] + 0.5).astype(np.int64), 0, W - 1)
    v = np.clip(np.floor(pix[:, 1] + 0.5).astype(np.int64), 0, H - 1)
    d = zbuf[v, u]
    return ~(np.isfinite(d) & (d < z * (1.0 - tol)))


def consistency_epe(flows, cameras: Sequence[CameraModel], reference_camera: CameraModel,
                    depth: np.ndarray, mask=None, occlusion_tol: float = 0.01, end_depth: str = "surface") -> float:
    """Multi-view motion agreement measured in the reference view.

    Every valid reference pixel is lifted with ``depth``; in each other view
    its flow is read at the corresponding pixel, the end point is lifted back
    and projected into the reference view. The result is the mean L2 distance
    between these transferred flows and the reference view's own flow, over
    views and points.

    Flows that carry ``end_depth`` lift their end pixels at that depth.
    Otherwise ``end_depth`` picks the rule: ``"surface"`` reads the lifted
    scene's depth under the end pixel (motion along the surface), ``"start"``
    reuses the start point's depth. A MotionField3D input is transferred
    through its true displaced positions.
    """
    if end_depth not in ("surface", "start"):
        raise ValueError(f"unknown end_depth {end_depth!r}")
    H, W = reference_camera.shape
    valid = np.isfinite(depth) & (np.asarray(depth) > 0)
    if mask is not None:
        m = mask.binary() if isinstance(mask, MotionMask) else np.asarray(mask, dtype=np.float64) >= 0.5
        valid &= m
    if isinstance(flows, MotionField3D):
        return _field_epe(flows, cameras, reference_camera, valid)
    if len(flows) != len(cameras) or len(cameras) < 2:
        raise DimensionMismatch("need >= 2 aligned views")
    ref_i = _match_camera(cameras, reference_camera)
    ref_flow = flows[ref_i]
    valid &= ref_flow.valid_mask
    cloud = unproject(np.zeros((H, W)), np.where(valid, depth, np.nan), reference_camera)
    X = cloud.positions
    p = cloud.source_pixel.astype(np.float64)
    f_ref = ref_flow.stack()[cloud.source_pixel[:, 1], cloud.source_pixel[:, 0]]
    dists = []
    for i, (flow, cam) in enumerate(zip(flows, cameras)):
        if i == ref_i:
            continue
        q, z = project(X, cam)
        f, ok = bilinear_sample(flow.stack(), q, flow.valid_mask)
        ok &= z > Z_NEAR
        zbuf = _zbuffer(cloud, cam)
        ok &= _visible(X, cloud, cam, occlusion_tol, zbuf)
        if not ok.any():
            continue
        end_px = q[ok] + f[ok]
        k = cam.intrinsics
        zc = z[ok]
        if flow.end_depth is not None:
            z_end, carried = bilinear_sample(flow.end_depth, q[ok], flow.valid_mask)
            zc = np.where(carried, z_end, zc)
        elif end_depth == "surface":
            z_end = _surface_depth(cloud, cam, end_px)
            zc = np.where(np.isfinite(z_end), z_end, zc)
        end_cam = np.stack([zc * (end_px[:, 0] - k.cx) / k.fx, zc * (end_px[:, 1] - k.cy) / k.fy, zc], axis=1)
        end_world = cam.pose.inverse().transform(end_cam)
        end_ref, _ = project(end_world, reference_camera)
        transferred = end_ref - p[ok]
        dists.append(np.linalg.norm(transferred - f_ref[ok], axis=1))
    if not dists:
        raise NoCorrespondence("occlusion test removed every correspondence")
    return float(np.mean(np.concatenate(dists)))


def _surface_depth(cloud: PointCloud, cam: CameraModel, pixels: np.ndarray) -> np.ndarray:
    """Depth of the lifted surface under ``pixels`` of ``cam``; NaN off the surface.

    Inverse depth is interpolated linearly over the triangulated projections,
    which is exact on planar pieces.
    """
    pix, z = project(cloud.positions, cam)
    front = z > Z_NEAR
    if front.sum() < 3:
        return np.full(len(pixels), np.nan)
    inv = LinearNDInterpolator(pix[front], 1.0 / z[front])(pixels)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(inv > 0, 1.0 / inv, np.nan)


def _match_camera(cameras, ref) -> int:
    for i, c in enumerate(cameras):
        if (np.allclose(c.pose.rotation, ref.pose.rotation, atol=1e-12)
                and np.allclose(c.pose.translation, ref.pose.translation, atol=1e-12)):
            return i
    raise DimensionMismatch("reference camera is not among the views")


def _field_epe(field: MotionField3D, cameras, reference_camera, valid) -> float:
    start, _ = project(field.base, reference_camera)
    end, _ = project(field.displaced, reference_camera)
    f_ref = end - start
    dists = []
    for cam in cameras:
        sf = project_motion(field, cam)
        if not len(sf.index):
            continue
        # lifting the view's end point at its true depth recovers the displaced point
        end_world = field.displaced[sf.index]
        end_ref, _ = project(end_world, reference_camera)
        dists.append(np.linalg.norm((end_ref - start[sf.index]) - f_ref[sf.index], axis=1))
    if not dists:
        raise NoCorrespondence("no view sees the field")
    return float(np.mean(np.concatenate(dists)))


def write_motion_ply(field: MotionField3D, path) -> None:
    m = field.motion
    write_ply(path, {"x": field.base[:, 0], "y": field.base[:, 1], "z": field.base[:, 2],
                     "dx": m[:, 0], "dy": m[:, 1], "dz": m[:, 2],
                     "index": field.point_index.astype(np.float64)}, dtype="<f8")


def read_motion_ply(path) -> MotionField3D:
    d = read_ply(path)
    base = np.stack([d["x"], d["y"], d["z"]], axis=1)
    motion = np.stack([d["dx"], d["dy"], d["dz"]], axis=1)
    index = d["index"].astype(np.int64) if "index" in d else np.arange(len(base))
    return MotionField3D(base, base + motion, index)


def write_loss_csv(field: MotionField3D, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["iteration", "lr", "loss"])
        for k, lr, loss in field.loss_history:
            wr.writerow([k, repr(float(lr)), repr(float(loss))])
