"""Pinhole cameras, rigid poses, (un)projection and preset camera paths.

Conventions: pixel ``(u, v)`` = (column, row) with integer coordinates at
pixel centers; camera looks down +z with y pointing down; a pose maps world
to camera, ``X_c = R @ X + t``; depth rasters hold camera-space z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateDepth, DimensionMismatch, EmptyCloud, UnknownPreset

Z_NEAR = 1e-4
PRESETS = ("zoom_in", "circular", "lateral", "up_down")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def default(cls, width: int, height: int) -> "CameraIntrinsics":
        """Image-size convention: f = max(W, H), principal point at the center."""
        f = float(max(width, height))
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        t.setflags(write=False)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation has det != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other``: apply ``other`` first."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))


@dataclass(frozen=True)
class CameraModel:
    intrinsics: CameraIntrinsics
    pose: CameraPose = field(default_factory=CameraPose.identity)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.shape

    def with_pose(self, pose: CameraPose) -> "CameraModel":
        return CameraModel(self.intrinsics, pose)


@dataclass(frozen=True)
class PointCloud:
    """Lifted pixels. ``colors`` may carry any number of channels in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray
    source_pixel: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        col = _frozen(self.colors)
        if col.ndim == 1:
            col = _frozen(col.reshape(-1, 1))
        pix = _frozen(self.source_pixel, dtype=np.int64).reshape(-1, 2)
        if not (len(pos) == len(col) == len(pix)):
            raise DimensionMismatch("positions, colors and source_pixel lengths differ")
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite point positions")
        if col.size and (col.min() < 0.0 or col.max() > 1.0):
            raise ValueError("colors outside [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "source_pixel", pix)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index], self.source_pixel[index])


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    preset: str

    def __len__(self) -> int:
        return len(self.poses)


class ProjectedPoints(NamedTuple):
    pixels: np.ndarray  # (M, 2) float (u, v)
    depth: np.ndarray   # (M,) camera-space z
    index: np.ndarray   # (M,) ids into the projected point set


def valid_depth_mask(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0)


def unproject(image: np.ndarray, depth: np.ndarray, camera: CameraModel) -> PointCloud:
    """Lift every valid-depth pixel into world space, carrying its color."""
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.shape[:2] != depth.shape or depth.ndim != 2:
        raise DimensionMismatch(f"image {image.shape} vs depth {depth.shape}")
    if depth.shape != camera.shape:
        raise DimensionMismatch(f"raster {depth.shape} vs camera {camera.shape}")
    valid = valid_depth_mask(depth)
    if not valid.any():
        raise EmptyCloud("no valid depth pixel")
    v, u = np.nonzero(valid)
    d = depth[v, u]
    k = camera.intrinsics
    cam = np.stack([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d], axis=1)
    world = camera.pose.inverse().transform(cam)
    colors = image[v, u] if image.ndim == 3 else image[v, u][:, None]
    return PointCloud(world, colors, np.stack([u, v], axis=1))


def project(points: np.ndarray, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Raw projection of (N, 3) world points: returns pixels (N, 2) and camera z (N,).

    No clipping; callers are responsible for the depth test.
    """
    pc = camera.pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    k = camera.intrinsics
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return pix, z


def project_points(cloud, camera: CameraModel, z_near: float = Z_NEAR) -> ProjectedPoints:
    """Project a PointCloud (or raw (N, 3) positions), dropping points with z <= z_near."""
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(positions) == 0:
        raise EmptyCloud("cannot project an empty cloud")
    pix, z = project(positions, camera)
    keep = z > z_near
    idx = np.nonzero(keep)[0]
    return ProjectedPoints(pix[keep], z[keep], idx)


def projection_jacobians(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Batched d(u, v)/dX for (N, 3) world points, shape (N, 2, 3). No depth check."""
    pc = camera.pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    k = camera.intrinsics
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    jc = np.zeros((len(pc), 2, 3))
    jc[:, 0, 0] = k.fx / z
    jc[:, 0, 2] = -k.fx * x / z**2
    jc[:, 1, 1] = k.fy / z
    jc[:, 1, 2] = -k.fy * y / z**2
    return jc @ camera.pose.rotation


def projection_jacobian(point, camera: CameraModel, z_near: float = Z_NEAR) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    z = camera.pose.transform(point)[0, 2]
    if not z > z_near:
        raise DegenerateDepth(f"camera-space z = {z} <= z_near = {z_near}")
    return projection_jacobians(point, camera)[0]


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> CameraPose:
    """World-to-camera pose at ``center`` whose optical axis passes through ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(np.asarray(down, dtype=np.float64), fwd)
    right /= np.linalg.norm(right)
    dn = np.cross(fwd, right)
    R = np.stack([right, dn, fwd], axis=0)
    return CameraPose(R, -R @ center)


def make_trajectory(preset: str, n_views: int, amplitude: float, z_focus: float = 1.0) -> Trajectory:
    """Deterministic camera path; pose 0 is always the identity (input view).

    lateral/up_down sweep the camera offset linearly over [-amplitude, amplitude]
    along x/y; zoom_in moves the camera forward up to ``amplitude``; circular
    places cameras on a circle of radius ``amplitude`` in the x-y plane, all
    looking at (0, 0, z_focus).
    """
    if preset not in PRESETS:
        raise UnknownPreset(f"unknown trajectory preset {preset!r}; expected one of {PRESETS}")
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    poses = [CameraPose.identity()]
    m = n_views - 1
    if m:
        if preset in ("lateral", "up_down"):
            axis = 0 if preset == "lateral" else 1
            for off in np.linspace(-amplitude, amplitude, m):
                t = np.zeros(3)
                t[axis] = off
                poses.append(CameraPose(np.eye(3), t))
        elif preset == "zoom_in":
            for k in range(1, n_views):
                poses.append(CameraPose(np.eye(3), np.array([0.0, 0.0, -amplitude * k / m])))
        else:
            target = np.array([0.0, 0.0, z_focus])
            for k in range(m):
                theta = 2.0 * np.pi * k / m
                c = np.array([amplitude * np.cos(theta), amplitude * np.sin(theta), 0.0])
                poses.append(look_at(c, target))
    return Trajectory(tuple(poses), preset)


def cameras_along(intrinsics: CameraIntrinsics, poses: Sequence[CameraPose]) -> list[CameraModel]:
    return [CameraModel(intrinsics, p) for p in poses]
