"""File formats: PFM depth, 8-bit PNG/PGM rasters, binary PLY, camera rig JSON."""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMagic, TruncatedFile
from .geometry import CameraIntrinsics, CameraModel, CameraPose


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = f"Pf\n{data.shape[1]} {data.shape[0]}\n-1.0\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = f"PF\n{data.shape[1]} {data.shape[0]}\n-1.0\n"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise BadMagic(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise TruncatedFile(f"{path}: expected {count} floats")
    data = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    """Grayscale mask in [0, 1] (or boolean) as binary 8-bit PGM."""
    Image.fromarray(to_uint8(np.asarray(mask, dtype=np.float64))).save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")).astype(np.float64) / 255.0


_PLY_TYPES = {np.dtype("<f4"): "float", np.dtype("<f8"): "double",
              np.dtype("<i4"): "int", np.dtype("<u1"): "uchar"}
_PLY_NAMES = {v: k for k, v in _PLY_TYPES.items()}
_PLY_NAMES.update({"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int32": np.dtype("<i4"),
                   "uint8": np.dtype("<u1")})


def write_ply(path, columns: dict, dtype="<f4") -> None:
    """Binary little-endian PLY with one ``vertex`` element; columns name -> (N,) array."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    dt = np.dtype([(name, np.dtype(dtype)) for name in names])
    rec = np.empty(n, dtype=dt)
    for name in names:
        rec[name] = columns[name]
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {_PLY_TYPES[np.dtype(dtype)]} {name}" for name in names]
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise BadMagic(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    n, fields = 0, []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            fields.append((parts[2], _PLY_NAMES[parts[1]]))
    dt = np.dtype(fields)
    body = raw[end + len(b"end_header\n"):]
    if len(body) < dt.itemsize * n:
        raise TruncatedFile(f"{path}: expected {n} vertices")
    rec = np.frombuffer(body, dtype=dt, count=n)
    return {name: rec[name].copy() for name, _ in fields}


def write_rig(path, intrinsics: CameraIntrinsics, poses) -> None:
    doc = {"intrinsics": intrinsics.to_dict(),
           "poses": [[float(x) for x in p.matrix.reshape(-1)] for p in poses]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_rig(path) -> list[CameraModel]:
    doc = json.loads(Path(path).read_text())
    k = doc["intrinsics"]
    intr = CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                            int(k["width"]), int(k["height"]))
    return [CameraModel(intr, CameraPose.from_matrix(p)) for p in doc["poses"]]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
