"""Image-quality metrics and the full/masked evaluation protocol."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    out = correlate1d(correlate1d(img, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b) -> float:
    """Mean structural similarity over all valid 11x11 windows and channels."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images of shape {a.shape[:2]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _window()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + C1) * (2 * sxy + C2)
        den = (mx * mx + my * my + C1) * (sxx + syy + C2)
        scores.append(num / den)
    return float(np.mean(scores))


def mask_crop(mask: np.ndarray, min_size: int = SSIM_WINDOW) -> tuple[slice, slice]:
    """Bounding box of ``mask`` grown symmetrically (and clamped) to at least ``min_size`` per side."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise ValueError("mask is empty")
    out = []
    for idx, size in ((rows, mask.shape[0]), (cols, mask.shape[1])):
        lo, hi = int(idx[0]), int(idx[-1]) + 1
        target = min(min_size, size)
        if hi - lo < target:
            lo = max(0, min(lo - (target - (hi - lo)) // 2, size - target))
            hi = lo + target
        out.append(slice(lo, hi))
    return out[0], out[1]


def masked_metrics(a, b, mask) -> tuple[float, float]:
    """(PSNR, SSIM) after zeroing pixels outside ``mask`` and cropping to its bounding box."""
    a, b = _pair(a, b)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image shape {a.shape[:2]}")
    keep = m[..., None] if a.ndim == 3 else m
    a, b = np.where(keep, a, 0.0), np.where(keep, b, 0.0)
    rs, cs = mask_crop(m)
    a, b = a[rs, cs], b[rs, cs]
    return psnr(a, b), ssim(a, b)


@dataclass
class FrameMetrics:
    frame: int
    camera: int
    psnr: float
    ssim: float
    psnr_mask: float
    ssim_mask: float


COLUMNS = ("frame", "camera", "psnr", "ssim", "psnr_mask", "ssim_mask")


def evaluate_views(render_fn, scene, cameras=None, frames=None) -> list[FrameMetrics]:
    """Score ``render_fn(camera, t) -> rgb`` against every (camera, frame) of ``scene``.

    ``cameras`` defaults to the held-out views (training views when there are none).
    """
    cams = cameras if cameras is not None else (scene.test_cameras or scene.train_cameras)
    rows = []
    for cam in cams:
        times = scene.times(cam.id)
        for k in (range(len(times)) if frames is None else frames):
            gt = scene.image(cam.id, k)
            pred = np.clip(render_fn(cam, times[k]), 0.0, 1.0)
            mask = scene.eval_mask(cam.id, k)
            if np.any(mask):
                pm, sm = masked_metrics(pred, gt, mask)
            else:
                pm, sm = float("nan"), float("nan")
            rows.append(FrameMetrics(k, cam.id, psnr(pred, gt), ssim(pred, gt), pm, sm))
    return rows


def mean_metrics(rows: list[FrameMetrics]) -> dict[str, float]:
    return {c: float(np.nanmean([getattr(r, c) for r in rows])) for c in COLUMNS[2:]}


def metrics_csv(rows: list[FrameMetrics]) -> str:
    """CSV text with one line per frame and a final ``mean`` line."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r.frame, r.camera] + [f"{getattr(r, c):.4f}" for c in COLUMNS[2:]])
    if rows:
        means = mean_metrics(rows)
        w.writerow(["mean", "all"] + [f"{means[c]:.4f}" for c in COLUMNS[2:]])
    return buf.getvalue()
