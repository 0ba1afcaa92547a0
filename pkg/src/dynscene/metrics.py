"""PSNR, SSIM (with its image-space gradient), EPE and evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, EmptyMask, EmptyOverlap, ImageTooSmall

WIN = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
PSNR_CSV_CAP = 99.0


def gaussian_kernel(size: int = WIN, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


_KERNEL = gaussian_kernel()


def _as3(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation keeping only full-support centers."""
    rows = sliding_window_view(x, WIN, axis=0) @ _KERNEL          # (H-10, W, C)
    return sliding_window_view(rows, WIN, axis=1) @ _KERNEL       # (H-10, W-10, C)


def _filter_adjoint(m: np.ndarray) -> np.ndarray:
    """Adjoint of ``_filter_valid`` (the kernel is symmetric)."""
    r = WIN // 2
    return _filter_valid(np.pad(m, ((2 * r, 2 * r), (2 * r, 2 * r), (0, 0))))


def _check(a, b):
    a, b = _as3(a), _as3(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if min(a.shape[:2]) < WIN:
        raise ImageTooSmall(f"SSIM needs at least {WIN} px per side, got {a.shape[:2]}")
    return a, b


def _stats(a, b):
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a ** 2
    var_b = _filter_valid(b * b) - mu_b ** 2
    cov = _filter_valid(a * b) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim_map(a, b) -> np.ndarray:
    """Per-center, per-channel SSIM over full 11x11 windows, shape (H-10, W-10, C)."""
    a, b = _check(a, b)
    mu_a, mu_b, var_a, var_b, cov = _stats(a, b)
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return num / den


def window_weights(mask, shape, full_window: bool = True) -> np.ndarray:
    """Normalized weights over SSIM window centers.

    ``full_window`` keeps centers whose whole window lies in ``mask``; otherwise
    centers whose own pixel is in ``mask``.
    """
    H, W = shape
    if mask is None:
        sel = np.ones((H - WIN + 1, W - WIN + 1), dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if full_window:
            win = sliding_window_view(m, (WIN, WIN))
            sel = win.all(axis=(2, 3))
        else:
            r = WIN // 2
            sel = m[r:H - r, r:W - r]
    n = int(sel.sum())
    if n == 0:
        raise EmptyMask("no SSIM window inside the mask")
    return sel / n


def ssim(a, b, mask=None) -> float:
    a3, b3 = _check(a, b)
    sel = window_weights(mask, a3.shape[:2]) > 0
    # a plain mean over the selected windows keeps ssim(x, x) exactly 1
    return float(np.mean(ssim_map(a3, b3).mean(axis=2)[sel]))


def ssim_and_grad(x, y, weights: np.ndarray):
    """Weighted mean SSIM(x, y) and its gradient with respect to ``x``.

    ``weights`` is an (H-10, W-10) array over window centers summing to 1.
    """
    x3, y3 = _check(x, y)
    C = x3.shape[2]
    mu_x, mu_y, var_x, var_y, cov = _stats(x3, y3)
    a1 = 2 * mu_x * mu_y + C1
    a2 = 2 * cov + C2
    b1 = mu_x ** 2 + mu_y ** 2 + C1
    b2 = var_x + var_y + C2
    s = a1 * a2 / (b1 * b2)
    w = weights[..., None] / C
    value = float(np.sum(s * w))
    d_mu = 2 * mu_y * a2 / (b1 * b2) - s * 2 * mu_x / b1
    d_var = -s / b2
    d_cov = 2 * a1 / (b1 * b2)
    g = (_filter_adjoint(w * (d_mu - 2 * mu_x * d_var - mu_y * d_cov))
         + 2 * x3 * _filter_adjoint(w * d_var)
         + y3 * _filter_adjoint(w * d_cov))
    return value, g.reshape(np.shape(x))


def psnr(a, b, mask=None) -> float:
    """10*log10(1/MSE) over (masked) pixels; +inf for identical inputs."""
    a, b = _as3(a), _as3(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    d2 = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise EmptyMask("PSNR mask is empty")
        d2 = d2[m]
    mse = float(np.mean(d2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def epe(f, g, mask=None) -> float:
    """Mean end-point distance between two flows over pixels valid in both."""
    if f.shape != g.shape:
        raise DimensionMismatch(f"{f.shape} vs {g.shape}")
    m = f.valid_mask & g.valid_mask
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyOverlap("flows share no valid pixel")
    d = np.hypot(f.u[m] - g.u[m], f.v[m] - g.v[m])
    return float(np.mean(d))


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    m_psnr: float = None
    m_ssim: float = None
    epe: float = None
    frames: list = field(default_factory=list)

    COLUMNS = ("frame", "view", "time", "PSNR", "SSIM", "M.PSNR", "M.SSIM", "EPE", "LPIPS", "PIQE")

    def rows(self):
        def fmt(x, cap=False):
            if x is None:
                return "n/a"
            if cap and math.isinf(x):
                return f"{PSNR_CSV_CAP:.6f}"
            return repr(float(x))

        for fr in self.frames:
            yield [fr["frame"], fr.get("view", ""), fr.get("time", ""), fmt(fr["psnr"], True),
                   fmt(fr["ssim"]), fmt(fr.get("m_psnr"), True), fmt(fr.get("m_ssim")),
                   fmt(fr.get("epe")), "n/a", "n/a"]
        yield ["mean", "", "", fmt(self.psnr, True), fmt(self.ssim), fmt(self.m_psnr, True),
               fmt(self.m_ssim), fmt(self.epe), "n/a", "n/a"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(self.COLUMNS)
            wr.writerows(self.rows())

    def to_dict(self) -> dict:
        def enc(x):
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            return x

        d = asdict(self)
        d["frames"] = [{k: enc(v) for k, v in fr.items()} for fr in self.frames]
        return {("PSNR" if k == "psnr" else "SSIM" if k == "ssim" else "M.PSNR" if k == "m_psnr"
                 else "M.SSIM" if k == "m_ssim" else "EPE" if k == "epe" else k): enc(v)
                for k, v in d.items()}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def evaluate_frames(preds, gts, masks=None, meta=None) -> EvalReport:
    """Per-frame and mean metrics; ``masks`` optional per-frame motion masks.

    Mean PSNR is infinite when any frame is a perfect match.
    """
    if len(preds) != len(gts):
        raise DimensionMismatch("prediction and ground-truth frame counts differ")
    frames = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        rec = {"frame": i, "psnr": psnr(p, g), "ssim": ssim(p, g)}
        if meta is not None:
            rec.update(meta[i])
        if masks is not None and masks[i] is not None and np.any(masks[i]):
            rec["m_psnr"] = psnr(p, g, masks[i])
            try:
                rec["m_ssim"] = ssim(p, g, masks[i])
            except EmptyMask:
                rec["m_ssim"] = None
        frames.append(rec)
    return EvalReport(psnr=_mean(f["psnr"] for f in frames), ssim=_mean(f["ssim"] for f in frames),
                      m_psnr=_mean(f.get("m_psnr") for f in frames),
                      m_ssim=_mean(f.get("m_ssim") for f in frames), frames=frames)
