"""Z-buffered point splatting of lifted clouds plus scanline hole filling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AllHoles, DimensionMismatch
from .geometry import CameraModel, PointCloud, project, unproject, Z_NEAR

MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class RenderedView:
    color: np.ndarray      # (H, W, C)
    depth: np.ndarray      # (H, W), NaN where no point landed
    hole_mask: np.ndarray  # (H, W) bool

    @property
    def valid(self) -> np.ndarray:
        return ~self.hole_mask


@dataclass(frozen=True)
class MotionMask:
    mask: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionMismatch("motion mask must be a 2D raster")
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise ValueError("motion mask values outside [0, 1]")
        object.__setattr__(self, "mask", m)

    def binary(self, threshold: float = MASK_THRESHOLD) -> np.ndarray:
        return self.mask >= threshold


def _disc_offsets(radius: int) -> list[tuple[int, int]]:
    r2 = (radius + 0.5) ** 2
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dx * dx + dy * dy <= r2 and (dx, dy) != (0, 0)]
    return offs


def _zbuffer(flat_pix: np.ndarray, depth: np.ndarray, order: np.ndarray, n_pixels: int):
    """Winner per pixel: smallest depth, ties (within 1e-9) to smallest point id.

    Returns (pixels, winning point ids)."""
    if len(flat_pix) == 0:
        return flat_pix, flat_pix
    # quantize depth so near-equal depths compare equal and fall back to the id
    dq = np.floor(depth / 1e-9)
    srt = np.lexsort((order, dq, flat_pix))
    p = flat_pix[srt]
    first = np.ones(len(p), dtype=bool)
    first[1:] = p[1:] != p[:-1]
    return p[first], srt[first]


def render_view(cloud: PointCloud, camera: CameraModel, splat_radius: int = 1) -> RenderedView:
    """Splat every point of ``cloud`` into ``camera``; holes are left unfilled.

    Points first claim the pixel they round to (z-buffered); the disc footprint
    of ``splat_radius`` then covers only pixels no point landed on directly,
    again z-buffered. This keeps an identity re-render exact while closing
    single-pixel cracks.
    """
    H, W = camera.shape
    C = cloud.colors.shape[1]
    pix, z = project(cloud.positions, camera)
    keep = z > Z_NEAR
    ids = np.nonzero(keep)[0]
    ui = np.floor(pix[keep, 0] + 0.5).astype(np.int64)
    vi = np.floor(pix[keep, 1] + 0.5).astype(np.int64)
    zk = z[keep]

    color = np.zeros((H, W, C))
    depth = np.full((H, W), np.nan)
    hit = np.zeros(H * W, dtype=bool)
    flat_color = color.reshape(H * W, C)
    flat_depth = depth.reshape(H * W)

    passes = [[(0, 0)], _disc_offsets(splat_radius) if splat_radius > 0 else []]
    for offsets in passes:
        if not offsets:
            continue
        cand_pix, cand_id, cand_z = [], [], []
        for dx, dy in offsets:
            u, v = ui + dx, vi + dy
            inside = (u >= 0) & (u < W) & (v >= 0) & (v < H)
            fp = v[inside] * W + u[inside]
            free = ~hit[fp]
            cand_pix.append(fp[free])
            cand_id.append(ids[inside][free])
            cand_z.append(zk[inside][free])
        fp = np.concatenate(cand_pix)
        pid = np.concatenate(cand_id)
        cz = np.concatenate(cand_z)
        won_pix, won = _zbuffer(fp, cz, pid, H * W)
        flat_color[won_pix] = cloud.colors[pid[won]]
        flat_depth[won_pix] = cz[won]
        hit[won_pix] = True
    return RenderedView(color, depth, ~hit.reshape(H, W))


def _interp_rows(values: np.ndarray, holes: np.ndarray):
    """Linear interpolation along axis 1 between the nearest non-holes on each side.

    Returns (filled values, mask of pixels that could be filled)."""
    H, W = holes.shape
    idx = np.broadcast_to(np.arange(W), (H, W))
    left = np.where(~holes, idx, -1)
    left = np.maximum.accumulate(left, axis=1)
    right = np.where(~holes, idx, W)
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    ok = holes & (left >= 0) & (right < W)
    out = values.copy()
    r, c = np.nonzero(ok)
    lft, rgt = left[r, c], right[r, c]
    w = ((c - lft) / (rgt - lft))[:, None]
    out[r, c] = (1.0 - w) * values[r, lft] + w * values[r, rgt]
    return out, ok


def fill_array(values: np.ndarray, holes: np.ndarray) -> np.ndarray:
    """Fill ``values`` (H, W[, C]) at ``holes`` from non-hole pixels only.

    Row interpolation first; holes without a non-hole neighbour on both sides
    of the row are interpolated along their column; anything left takes the
    nearest non-hole value.
    """
    holes = np.asarray(holes, dtype=bool)
    if not holes.any():
        return values
    if holes.all():
        raise AllHoles("every pixel is a hole")
    squeeze = values.ndim == 2
    vals = values[..., None] if squeeze else values
    vals = np.array(vals, dtype=np.float64, copy=True)
    vals[holes] = 0.0
    out, done = _interp_rows(vals, holes)
    col, col_ok = _interp_rows(vals.transpose(1, 0, 2), holes.T)
    col, col_ok = col.transpose(1, 0, 2), col_ok.T
    vert = col_ok & ~done
    out[vert] = col[vert]
    rest = holes & ~done & ~vert
    if rest.any():
        _, (ri, ci) = ndimage.distance_transform_edt(holes, return_indices=True)
        out[rest] = vals[ri[rest], ci[rest]]
    return out[..., 0] if squeeze else out


def fill_holes(view: RenderedView) -> RenderedView:
    if not view.hole_mask.any():
        return view
    return RenderedView(fill_array(view.color, view.hole_mask), view.depth, view.hole_mask)


def render_motion_mask(mask: MotionMask, depth: np.ndarray, source_camera: CameraModel,
                       target_camera: CameraModel, splat_radius: int = 1) -> MotionMask:
    """Carry the mask through lift-and-reproject into ``target_camera``."""
    m = mask.mask if isinstance(mask, MotionMask) else np.asarray(mask, dtype=np.float64)
    if m.shape != np.shape(depth):
        raise DimensionMismatch(f"mask {m.shape} vs depth {np.shape(depth)}")
    cloud = unproject(m, depth, source_camera)
    view = fill_holes(render_view(cloud, target_camera, splat_radius))
    return MotionMask(np.clip(view.color[..., 0], 0.0, 1.0))
