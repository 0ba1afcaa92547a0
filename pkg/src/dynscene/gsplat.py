"""CPU 3D Gaussian splatting: EWA projection, front-to-back compositing,
hand-derived backward pass, photometric loss and static (t = 0) fitting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyCloud, EmptyValidMask, NonFiniteLoss
from .geometry import CameraModel, PointCloud, Z_NEAR
from .io import read_ply, write_ply
from .metrics import ssim_and_grad, window_weights

log = logging.getLogger(__name__)

LOWPASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TILE = 16
LOG_SCALE_MIN = np.log(1e-6)
LOG_SCALE_MAX = np.log(1e3)
SH_C0 = 0.28209479177387814


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian:
    mean: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray     # log-scales
    opacity: float        # logit
    color: np.ndarray


@dataclass
class GaussianCloud:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if n < 1:
            raise EmptyCloud("a Gaussian cloud needs at least one member")
        self.quats = np.array(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)

    PARAMS = ("means", "quats", "log_scales", "opacity_logits", "colors")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.quats[i].copy(), self.log_scales[i].copy(),
                        float(self.opacity_logits[i]), self.colors[i].copy())

    @property
    def gaussians(self) -> list:
        return [self[i] for i in range(len(self))]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means, self.quats, self.log_scales, self.opacity_logits, self.colors)

    def permuted(self, order) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, p)[order] for p in self.PARAMS))

    def project_constraints(self) -> None:
        """Renormalize quaternions, clamp scales and colors in place."""
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.clip(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scales)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)


@dataclass
class GaussianGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: "GaussianGrads"):
        for p in GaussianCloud.PARAMS:
            getattr(self, p).__iadd__(getattr(other, p))
        return self

    def scaled(self, s: float) -> "GaussianGrads":
        return GaussianGrads(*(getattr(self, p) * s for p in GaussianCloud.PARAMS))


def scene_extent(positions: np.ndarray) -> float:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ext = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    if ext > 0:
        return ext
    ext = float(np.linalg.norm(positions[0]))
    return ext if ext > 0 else 1.0


def init_from_pointcloud(cloud: PointCloud, opacity: float = 0.9) -> GaussianCloud:
    """One isotropic Gaussian per point sized by the mean distance to its 3 nearest neighbours."""
    n = len(cloud)
    if n == 0:
        raise EmptyCloud("cannot initialize Gaussians from an empty cloud")
    pos = cloud.positions
    if n == 1:
        scale = np.full(1, np.log(0.01 * scene_extent(pos)))
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(pos).query(pos, k=k + 1)
        nn = dist[:, 1:].mean(axis=1)
        nn = np.where(nn > 0, nn, 0.01 * scene_extent(pos))
        scale = np.log(nn)
    colors = cloud.colors[:, :3] if cloud.colors.shape[1] >= 3 else np.repeat(cloud.colors[:, :1], 3, axis=1)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(pos, quats, np.repeat(scale[:, None], 3, axis=1),
                         np.full(n, logit(opacity)), colors)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_vjp(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull an (N, 3, 3) gradient on R back to the unit quaternion (N, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


@dataclass
class _Projection:
    order: np.ndarray      # depth-sorted ids of Gaussians that can contribute
    tc: np.ndarray         # camera-space means
    J: np.ndarray          # (N, 2, 3)
    mean2d: np.ndarray
    cov_cam: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray      # (N, 3): a, b, c of the inverse 2D covariance
    opacity: np.ndarray
    qn: np.ndarray         # normalized quaternions
    qnorm: np.ndarray
    R: np.ndarray
    S: np.ndarray
    radius: np.ndarray


@dataclass
class RasterContext:
    projection: _Projection
    tiles: list = field(default_factory=list)  # (pixel ids, gaussian ids, alpha, T, active, d)


def _project_gaussians(cloud: GaussianCloud, camera: CameraModel) -> _Projection:
    k = camera.intrinsics
    W_ = camera.pose.rotation
    tc = cloud.means @ W_.T + camera.pose.translation
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    front = z > Z_NEAR
    zs = np.where(front, z, 1.0)
    J = np.zeros((len(tc), 2, 3))
    J[:, 0, 0] = k.fx / zs
    J[:, 0, 2] = -k.fx * x / zs ** 2
    J[:, 1, 1] = k.fy / zs
    J[:, 1, 2] = -k.fy * y / zs ** 2
    mean2d = np.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], axis=1)
    qnorm = np.linalg.norm(cloud.quats, axis=1)
    qn = cloud.quats / qnorm[:, None]
    R = quat_to_rotmat(qn)
    S = np.exp(cloud.log_scales)
    M = R * S[:, None, :]
    cov = M @ M.transpose(0, 2, 1)
    cov_cam = W_ @ cov @ W_.T
    cov2d = J @ cov_cam @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    opacity = sigmoid(cloud.opacity_logits)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    # beyond this radius alpha < 1/255 for sure, so culling is exact
    with np.errstate(divide="ignore", invalid="ignore"):
        thr = 2.0 * np.log(255.0 * opacity)
    radius = np.sqrt(np.maximum(thr, 0.0) * lam_max)
    live = front & (thr > 0)
    ids = np.nonzero(live)[0]
    order = ids[np.lexsort((ids, z[ids]))]
    return _Projection(order, tc, J, mean2d, cov_cam, cov2d, conic, opacity, qn, qnorm, R, S, radius)


def rasterize(cloud: GaussianCloud, camera: CameraModel, background=None, return_context: bool = False):
    """Render ``cloud`` into ``camera``: returns (H, W, 3) color and (H, W) alpha.

    Gaussians are composited front to back in ascending camera depth (ties by
    index) with alpha = opacity * exp(-0.5 d^T cov2d^-1 d), clamped to 0.99
    and skipped below 1/255. The background is black unless given.
    """
    H, W = camera.shape
    pr = _project_gaussians(cloud, camera)
    color = np.zeros((H * W, 3))
    alpha = np.zeros(H * W)
    ctx = RasterContext(pr)
    order = pr.order
    if len(order):
        m2, rad = pr.mean2d[order], pr.radius[order]
        lo_u, hi_u = m2[:, 0] - rad, m2[:, 0] + rad
        lo_v, hi_v = m2[:, 1] - rad, m2[:, 1] + rad
        cols = cloud.colors
        for ty in range(0, H, TILE):
            for tx in range(0, W, TILE):
                u1, v1 = min(tx + TILE, W) - 1, min(ty + TILE, H) - 1
                hitm = (hi_u >= tx) & (lo_u <= u1) & (hi_v >= ty) & (lo_v <= v1)
                if not hitm.any():
                    continue
                g = order[hitm]
                vv, uu = np.mgrid[ty:v1 + 1, tx:u1 + 1]
                pix = (vv * W + uu).ravel()
                d = np.stack([uu.ravel(), vv.ravel()], axis=1)[:, None, :] - pr.mean2d[g][None]
                a, b, c = pr.conic[g, 0], pr.conic[g, 1], pr.conic[g, 2]
                q = a * d[..., 0] ** 2 + 2 * b * d[..., 0] * d[..., 1] + c * d[..., 1] ** 2
                raw = pr.opacity[g] * np.exp(-0.5 * q)
                active = (raw >= ALPHA_MIN) & (raw <= ALPHA_MAX)
                al = np.where(raw < ALPHA_MIN, 0.0, np.minimum(raw, ALPHA_MAX))
                trans = np.cumprod(1.0 - al, axis=1)
                T = np.concatenate([np.ones((len(pix), 1)), trans[:, :-1]], axis=1)
                w = al * T
                color[pix] = w @ cols[g]
                alpha[pix] = w.sum(axis=1)
                if return_context:
                    ctx.tiles.append((pix, g, al, T, active, d))
    color = color.reshape(H, W, 3)
    alpha = alpha.reshape(H, W)
    if background is not None:
        color = color + (1.0 - alpha)[..., None] * np.asarray(background, dtype=np.float64)
    if return_context:
        ctx.background = background
        return color, alpha, ctx
    return color, alpha


def backward_rasterize(cloud: GaussianCloud, camera: CameraModel, grad_color: np.ndarray,
                       grad_alpha: np.ndarray = None, context: RasterContext = None) -> GaussianGrads:
    """Adjoint of :func:`rasterize` for the loss gradient on its two outputs.

    The quaternion gradient is taken through the internal normalization, i.e.
    it is tangent to the unit sphere for unit inputs.
    """
    H, W = camera.shape
    if context is None:
        _, _, context = rasterize(cloud, camera, return_context=True)
    pr = context.projection
    n = len(cloud)
    gc = np.asarray(grad_color, dtype=np.float64).reshape(H * W, 3)
    ga = np.zeros(H * W) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64).reshape(H * W).copy()
    bg = getattr(context, "background", None)
    if bg is not None:
        ga -= gc @ np.asarray(bg, dtype=np.float64)
    grads = GaussianGrads.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))  # dL/dQ for entries (0,0), off-diagonal (each), (1,1)
    cols_ext = np.concatenate([cloud.colors, np.ones((n, 1))], axis=1)
    for pix, g, al, T, active, d in context.tiles:
        g_ext = np.concatenate([gc[pix], ga[pix, None]], axis=1)
        w = al * T
        grads.colors[g] += w.T @ gc[pix]
        dot = g_ext @ cols_ext[g].T
        wd = w * dot
        cs = np.cumsum(wd, axis=1)
        behind = cs[:, -1:] - cs
        d_alpha = (T * dot - behind / (1.0 - al)) * active
        grads.opacity_logits[g] += np.sum(d_alpha * al, axis=0) * (1.0 - pr.opacity[g])
        gq = -0.5 * d_alpha * al
        dx, dy = d[..., 0], d[..., 1]
        sx, sy = np.sum(gq * dx, axis=0), np.sum(gq * dy, axis=0)
        a, b, c = pr.conic[g, 0], pr.conic[g, 1], pr.conic[g, 2]
        g_mean2d[g, 0] += -2.0 * (a * sx + b * sy)
        g_mean2d[g, 1] += -2.0 * (b * sx + c * sy)
        g_conic[g, 0] += np.sum(gq * dx * dx, axis=0)
        g_conic[g, 1] += np.sum(gq * dx * dy, axis=0)
        g_conic[g, 2] += np.sum(gq * dy * dy, axis=0)

    k = camera.intrinsics
    Wc = camera.pose.rotation
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 1], pr.conic[:, 2]
    GQ = np.empty((n, 2, 2))
    GQ[:, 0, 0], GQ[:, 0, 1], GQ[:, 1, 0], GQ[:, 1, 1] = g_conic[:, 0], g_conic[:, 1], g_conic[:, 1], g_conic[:, 2]
    G2 = -Q @ GQ @ Q
    J = pr.J
    G_cov_cam = J.transpose(0, 2, 1) @ G2 @ J
    GJ = 2.0 * G2 @ J @ pr.cov_cam
    tx, ty, tz = pr.tc[:, 0], pr.tc[:, 1], np.where(pr.tc[:, 2] > Z_NEAR, pr.tc[:, 2], 1.0)
    g_t = np.einsum("nki,nk->ni", J, g_mean2d)
    g_t[:, 0] += GJ[:, 0, 2] * (-k.fx / tz ** 2)
    g_t[:, 1] += GJ[:, 1, 2] * (-k.fy / tz ** 2)
    g_t[:, 2] += (GJ[:, 0, 0] * (-k.fx / tz ** 2) + GJ[:, 0, 2] * (2 * k.fx * tx / tz ** 3)
                  + GJ[:, 1, 1] * (-k.fy / tz ** 2) + GJ[:, 1, 2] * (2 * k.fy * ty / tz ** 3))
    grads.means += g_t @ Wc
    G_cov = Wc.T @ G_cov_cam @ Wc
    M = pr.R * pr.S[:, None, :]
    GM = 2.0 * G_cov @ M
    grads.log_scales += np.sum(GM * pr.R, axis=1) * pr.S
    gR = GM * pr.S[:, None, :]
    g_qn = _rotmat_vjp(pr.qn, gR)
    g_qn -= np.sum(g_qn * pr.qn, axis=1, keepdims=True) * pr.qn
    grads.quats += g_qn / pr.qnorm[:, None]
    return grads


# a frame matched to rounding level gets no gradient; Adam would otherwise
# blow float noise around an exact fit up into full-size steps
EXACT_FIT = 1e-12


def photometric_loss(rendered: np.ndarray, target: np.ndarray, valid: np.ndarray = None, lam: float = 0.2):
    """L = L1 + lam * (L_SSIM - L1) with L_SSIM = 1 - SSIM; returns (L, dL/drendered).

    L1 averages over valid pixels and channels; SSIM averages over the
    full-window centers whose pixel is valid.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatch(f"{rendered.shape} vs {target.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    H, W = rendered.shape[:2]
    valid = np.ones((H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EmptyValidMask("no valid pixel to supervise")
    C = rendered.shape[2] if rendered.ndim == 3 else 1
    diff = rendered - target
    vm = valid[..., None] if rendered.ndim == 3 else valid
    count = valid.sum() * C
    l1 = float(np.abs(diff * vm).sum() / count)
    g_l1 = np.sign(diff) * vm / count
    if lam == 0.0:
        return l1, (g_l1 if l1 > EXACT_FIT else np.zeros_like(diff))
    weights = window_weights(valid, (H, W), full_window=False)
    s, g_s = ssim_and_grad(rendered, target, weights)
    l_ssim = 1.0 - s
    loss = l1 + lam * (l_ssim - l1)
    if l1 <= EXACT_FIT:
        return loss, np.zeros_like(diff)
    return loss, (1.0 - lam) * g_l1 - lam * g_s


@dataclass
class AdamGroup:
    lr: float
    m: np.ndarray
    v: np.ndarray


class Adam:
    """Adam with one step size per parameter group (scalar or broadcastable array)."""

    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.groups = {name: AdamGroup(np.asarray(lrs[name], dtype=np.float64), np.zeros_like(p), np.zeros_like(p))
                       for name, p in params.items() if np.any(np.asarray(lrs.get(name, 0.0)) > 0.0)}

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, grp in self.groups.items():
            g = grads[name]
            grp.m = b1 * grp.m + (1 - b1) * g
            grp.v = b2 * grp.v + (1 - b2) * g * g
            mh = grp.m / (1 - b1 ** self.t)
            vh = grp.v / (1 - b2 ** self.t)
            params[name] -= lr_scale * grp.lr * mh / (np.sqrt(vh) + self.eps)


def default_lrs(extent: float) -> dict:
    return {"means": 1.6e-4 * extent, "colors": 2.5e-3, "opacity_logits": 5e-2,
            "log_scales": 5e-3, "quats": 1e-3}


def view_loss(cloud: GaussianCloud, view, camera: CameraModel, lam: float, with_grad: bool = True):
    img, alpha, ctx = rasterize(cloud, camera, return_context=True)
    loss, g_img = photometric_loss(img, view.color, ~view.hole_mask, lam)
    if not with_grad:
        return loss, None
    return loss, backward_rasterize(cloud, camera, g_img, context=ctx)


def total_loss(cloud: GaussianCloud, views, lam: float) -> float:
    return float(np.mean([view_loss(cloud, v, c, lam, with_grad=False)[0] for v, c in views]))


def optimize_static(cloud: GaussianCloud, views: Sequence, steps: int, lam: float = 0.2, *,
                    lrs: dict = None, groups: Sequence[str] = None, seed: int = 0) -> GaussianCloud:
    """Fit the t = 0 Gaussians to (RenderedView, CameraModel) pairs.

    One view per step, drawn from a seeded sequence of shuffled passes; hole
    pixels are excluded from supervision. ``groups`` restricts which
    parameters move. Returns a new cloud whose mean training loss does not
    exceed the starting one.
    """
    if not views:
        raise ValueError("optimize_static needs at least one view")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = cloud.copy()
    lrs = dict(default_lrs(scene_extent(cloud.means)) if lrs is None else lrs)
    if groups is not None:
        lrs = {k: (v if k in groups else 0.0) for k, v in lrs.items()}
    params = {p: getattr(out, p) for p in GaussianCloud.PARAMS}
    opt = Adam(params, lrs)
    rng = np.random.default_rng(seed)
    initial = total_loss(cloud, views, lam)
    queue = []
    for step in range(steps):
        if not queue:
            queue = list(rng.permutation(len(views)))
        view, cam = views[queue.pop(0)]
        loss, g = view_loss(out, view, cam, lam)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"static loss became {loss} at step {step}")
        opt.step(params, {p: getattr(g, p) for p in GaussianCloud.PARAMS})
        out.project_constraints()
    final = total_loss(out, views, lam)
    if not np.isfinite(final):
        raise NonFiniteLoss(f"final static loss is {final}")
    log.info("static fit: loss %.6g -> %.6g over %d steps", initial, final, steps)
    if final > initial:
        log.warning("static fit did not improve (%.6g > %.6g); keeping the input cloud", final, initial)
        return cloud.copy()
    return out


def write_gaussian_ply(cloud: GaussianCloud, path) -> None:
    cols = {"x": cloud.means[:, 0], "y": cloud.means[:, 1], "z": cloud.means[:, 2]}
    for i in range(3):
        cols[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = cloud.quats[:, i]
    cols["opacity"] = cloud.opacity_logits
    for i in range(3):
        cols[f"f_dc_{i}"] = (cloud.colors[:, i] - 0.5) / SH_C0
    write_ply(path, cols, dtype="<f4")


def read_gaussian_ply(path) -> GaussianCloud:
    d = {k: v.astype(np.float64) for k, v in read_ply(path).items()}
    means = np.stack([d["x"], d["y"], d["z"]], axis=1)
    scales = np.stack([d[f"scale_{i}"] for i in range(3)], axis=1)
    quats = np.stack([d[f"rot_{i}"] for i in range(4)], axis=1)
    colors = np.stack([d[f"f_dc_{i}"] for i in range(3)], axis=1) * SH_C0 + 0.5
    return GaussianCloud(means, quats, scales, d["opacity"], colors)
