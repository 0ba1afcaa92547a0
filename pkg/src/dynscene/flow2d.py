"""Eulerian 2D flow fields, frozen-velocity advection and looping frame synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagic, DimensionMismatch, TruncatedFile, UnknownKind
from .pcrender import MotionMask, fill_array

FLO_MAGIC = b"PIEH"
SPLAT_EPS = 1e-6


@dataclass(frozen=True)
class FlowField2D:
    """Per-pixel displacement; ``end_depth`` optionally holds the camera depth of each displaced point."""

    u: np.ndarray
    v: np.ndarray
    valid_mask: np.ndarray = None
    end_depth: np.ndarray = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise DimensionMismatch(f"u {u.shape} vs v {v.shape}")
        valid = np.ones(u.shape, dtype=bool) if self.valid_mask is None else np.asarray(self.valid_mask, dtype=bool)
        if valid.shape != u.shape:
            raise DimensionMismatch("valid_mask shape differs from flow shape")
        u = np.where(valid, u, 0.0)
        v = np.where(valid, v, 0.0)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite flow on valid pixels")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid_mask", valid)
        if self.end_depth is not None:
            d = np.asarray(self.end_depth, dtype=np.float64)
            if d.shape != u.shape:
                raise DimensionMismatch("end_depth shape differs from flow shape")
            object.__setattr__(self, "end_depth", np.where(valid, d, np.nan))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, shape) -> "FlowField2D":
        return cls(np.zeros(shape), np.zeros(shape))

    def stack(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


@dataclass
class FrameSequence:
    """Frames at strictly increasing times; ``hole_masks`` flags synthesized (unobserved) pixels."""

    frames: list
    times: list
    meta: dict = field(default_factory=dict)
    hole_masks: list = None

    def __post_init__(self):
        if len(self.frames) != len(self.times):
            raise DimensionMismatch("frames and times differ in length")
        if self.hole_masks is not None and len(self.hole_masks) != len(self.frames):
            raise DimensionMismatch("one hole mask per frame is required")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.frames)


def bilinear_sample(field: np.ndarray, pts: np.ndarray, valid: np.ndarray = None):
    """Sample (H, W[, C]) at float (u, v) points.

    Returns (values, ok); ok is False for points whose 2x2 support leaves the
    raster or touches an invalid pixel. Values at those points are 0.
    """
    field = np.asarray(field, dtype=np.float64)
    H, W = field.shape[:2]
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    u, v = pts[:, 0], pts[:, 1]
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu = np.where(ok, u, 0.0)
    vv = np.where(ok, v, 0.0)
    u0 = np.minimum(np.floor(uu).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(vv).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = uu - u0
    b = vv - v0
    if valid is not None:
        ok &= valid[v0, u0] & valid[v0, u1] & valid[v1, u0] & valid[v1, u1]
    shp = (-1,) + (1,) * (field.ndim - 2)
    a, b = a.reshape(shp), b.reshape(shp)
    out = ((1 - a) * (1 - b) * field[v0, u0] + a * (1 - b) * field[v0, u1]
           + (1 - a) * b * field[v1, u0] + a * b * field[v1, u1])
    out[~ok] = 0.0
    return out, ok


def advect(positions, flow: FlowField2D, t: float):
    """Frozen-velocity advection p(t) = p(0) + t * F(p(0)).

    Returns (positions at t, in_bounds flags for the results).
    """
    p0 = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    vel, _ = bilinear_sample(flow.stack(), p0)
    pt = p0 + t * vel
    H, W = flow.shape
    inside = (pt[:, 0] >= 0) & (pt[:, 0] <= W - 1) & (pt[:, 1] >= 0) & (pt[:, 1] <= H - 1)
    return pt, inside


def synth_flow(kind: str, params: dict, mask) -> FlowField2D:
    """Analytic test flows, zero outside the binarized mask.

    uniform: {"u0", "v0"}; vortex: {"omega", "x0", "y0"}; shear: {"k", "y0"}.
    """
    m = mask.binary() if isinstance(mask, MotionMask) else np.asarray(mask, dtype=np.float64) >= 0.5
    H, W = m.shape
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    if kind == "uniform":
        u = np.full((H, W), float(params.get("u0", 0.0)))
        v = np.full((H, W), float(params.get("v0", 0.0)))
    elif kind == "vortex":
        w = float(params.get("omega", 1.0))
        x0 = float(params.get("x0", (W - 1) / 2))
        y0 = float(params.get("y0", (H - 1) / 2))
        u, v = -w * (y - y0), w * (x - x0)
    elif kind == "shear":
        k = float(params.get("k", 1.0))
        y0 = float(params.get("y0", (H - 1) / 2))
        u, v = k * (y - y0), np.zeros((H, W))
    else:
        raise UnknownKind(f"unknown flow kind {kind!r}")
    return FlowField2D(np.where(m, u, 0.0), np.where(m, v, 0.0))


def forward_warp(img: np.ndarray, disp: np.ndarray, source: np.ndarray):
    """Bilinear forward splat of ``img`` pixels selected by ``source`` by ``disp``.

    Returns (normalized image, coverage mask)."""
    H, W = img.shape[:2]
    C = img.shape[2]
    vs, us = np.nonzero(source)
    tu = us + disp[vs, us, 0]
    tv = vs + disp[vs, us, 1]
    u0 = np.floor(tu).astype(np.int64)
    v0 = np.floor(tv).astype(np.int64)
    a = tu - u0
    b = tv - v0
    acc = np.zeros((H * W, C))
    wsum = np.zeros(H * W)
    col = img[vs, us]
    # fixed corner order keeps the accumulation deterministic
    for du, dv, w in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)), (0, 1, (1 - a) * b), (1, 1, a * b)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H) & (w > 0)
        flat = vv[ok] * W + uu[ok]
        np.add.at(wsum, flat, w[ok])
        np.add.at(acc, flat, w[ok, None] * col[ok])
    covered = wsum > SPLAT_EPS
    out = np.zeros((H * W, C))
    out[covered] = acc[covered] / wsum[covered, None]
    return out.reshape(H, W, C), covered.reshape(H, W)


def synthesize_frame(base: np.ndarray, flow: FlowField2D, t: float, loop_period: float | None = 1.0,
                     return_holes: bool = False):
    """Looping frame at time ``t`` from a still and an Eulerian flow.

    With phase s = (t mod P) / P the frame blends the base warped forward by
    s*P*F (weight 1-s) with the base warped by (s-1)*P*F (weight s), so the
    sequence closes on itself at every multiple of P. ``loop_period=None``
    gives plain advection, the base warped by t*F. Pixels with zero flow
    are copied from the base unchanged. With ``return_holes`` the mask of
    pixels filled by interpolation in any contributing phase is also returned.
    """
    if t < 0 or (loop_period is not None and loop_period <= 0):
        raise ValueError("need t >= 0 and loop_period > 0")
    base = np.asarray(base, dtype=np.float64)
    squeeze = base.ndim == 2
    img = base[..., None] if squeeze else base
    F = flow.stack()
    moving = flow.valid_mask & ((flow.u != 0) | (flow.v != 0))
    if not moving.any():
        return (base.copy(), np.zeros(moving.shape, dtype=bool)) if return_holes else base.copy()
    if loop_period is None:
        phases = ((t, 1.0),)
    else:
        s = (t % loop_period) / loop_period
        phases = ((s * loop_period, 1.0 - s), ((s - 1.0) * loop_period, s))
    frame = np.zeros_like(img)
    filled = np.zeros(moving.shape, dtype=bool)
    for shift, weight in phases:
        if weight == 0.0:
            continue
        warped, covered = forward_warp(img, shift * F, moving)
        # only the moving region is resynthesized; static pixels are pinned below
        holes = ~covered & moving
        filled |= holes
        if holes.any():
            known = covered | ~moving
            src = np.where(covered[..., None], warped, img)
            warped = fill_array(src, ~known)
        frame += weight * warped
    frame[~moving] = img[~moving]
    frame = frame[..., 0] if squeeze else frame
    return (frame, filled) if return_holes else frame


def synthesize_sequence(base, flow: FlowField2D, times: Sequence[float], loop_period: float | None = 1.0,
                        fps: float = 30.0) -> FrameSequence:
    out = [synthesize_frame(base, flow, t, loop_period, return_holes=True) for t in times]
    return FrameSequence([f for f, _ in out], [float(t) for t in times], {"fps": fps, "loop_period": loop_period},
                         [h for _, h in out])


def write_flo(flow: FlowField2D, path) -> None:
    H, W = flow.shape
    data = np.empty((H, W, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([W, H], dtype="<i4").tobytes())
        f.write(data.tobytes())


def read_flo(path) -> FlowField2D:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise BadMagic(f"{path}: bad .flo magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: missing .flo dimensions")
    W, H = np.frombuffer(raw[4:12], dtype="<i4")
    n = int(W) * int(H) * 2
    if len(raw) < 12 + 4 * n:
        raise TruncatedFile(f"{path}: expected {n} floats")
    data = np.frombuffer(raw[12:12 + 4 * n], dtype="<f4").reshape(int(H), int(W), 2)
    return FlowField2D(data[..., 0].astype(np.float64), data[..., 1].astype(np.float64))


def write_sequence(seq: FrameSequence, out_dir, extra: dict = None) -> Path:
    from .io import ensure_dir, write_json, write_pgm, write_png

    out = ensure_dir(out_dir)
    for i, frame in enumerate(seq.frames):
        write_png(out / f"frame_{i:04d}.png", frame)
    if seq.hole_masks is not None:
        for i, holes in enumerate(seq.hole_masks):
            write_pgm(out / f"holes_{i:04d}.pgm", holes)
    manifest = {"fps": seq.meta.get("fps", 30.0), "loop_period": seq.meta.get("loop_period", 1.0),
                "times": list(seq.times)}
    manifest.update(extra or {})
    write_json(out / "manifest.json", manifest)
    return out


def read_sequence(in_dir) -> FrameSequence:
    from .io import read_pgm, read_png

    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    n = len(manifest["times"])
    frames = [read_png(d / f"frame_{i:04d}.png") for i in range(n)]
    holes = None
    if (d / "holes_0000.pgm").exists():
        holes = [read_pgm(d / f"holes_{i:04d}.pgm") >= 0.5 for i in range(n)]
    return FrameSequence(frames, manifest["times"], manifest, holes)
