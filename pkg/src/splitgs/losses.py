"""Training objectives.

Each image loss returns ``(value, d_rgb, d_alpha)`` so the caller can feed
the buffers straight into ``render_backward``.  Norms are mean absolute
error by default; ``norm="l2"`` switches to mean squared error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

LAMBDA_H = 0.1
LAMBDA_OMEGA = 1.0


def _check(*arrays):
    shape = arrays[0].shape[:2]
    for a in arrays[1:]:
        if a.shape[:2] != shape:
            raise ValueError(f"shape mismatch: {arrays[0].shape} vs {a.shape}")


def _residual_loss(residual: np.ndarray, norm: str):
    """Mean of |r| (or r^2) and its derivative w.r.t. r."""
    n = residual.size
    if norm == "l1":
        return float(np.abs(residual).sum() / n), np.sign(residual) / n
    if norm == "l2":
        return float((residual * residual).sum() / n), 2.0 * residual / n
    raise ValueError(f"unknown norm {norm!r}")


def foreground_loss(target: np.ndarray, mask: np.ndarray, rgb: np.ndarray, alpha: np.ndarray,
                    background: np.ndarray, norm: str = "l1"):
    """Mask-composited target vs alpha-composited foreground render, both over ``background``."""
    _check(target, mask, rgb, alpha)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    bg = np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
    goal = m * target + (1.0 - m) * bg
    pred = a * rgb + (1.0 - a) * bg
    value, d_pred = _residual_loss(pred - goal, norm)
    return value, d_pred * a, np.sum(d_pred * (rgb - bg), axis=-1)


def gaussian_kernel(radius: int, sigma: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_radius_for(width: int) -> tuple[int, float]:
    """Blur radius 9 px (sigma 3) at 1600 px width, scaled linearly, never below 1 px."""
    radius = max(1, int(round(9.0 * width / 1600.0)))
    return radius, radius / 3.0


def blur(image: np.ndarray, radius: int, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur with zero padding outside the frame."""
    k = gaussian_kernel(radius, radius / 3.0 if sigma is None else sigma)
    out = convolve1d(image, k, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, k, axis=1, mode="constant", cval=0.0)


def background_target(target: np.ndarray, mask: np.ndarray, radius: int | None = None,
                      sigma: float | None = None) -> np.ndarray:
    """Unmasked pixels keep the image; masked pixels take the blurred unmasked image."""
    _check(target, mask)
    if radius is None:
        radius, sigma = blur_radius_for(target.shape[1])
    m = np.asarray(mask, dtype=np.float64)[..., None]
    outside = (1.0 - m) * target
    return outside + m * blur(outside, radius, sigma)


def background_loss(target: np.ndarray, mask: np.ndarray, rgb: np.ndarray, blur_radius: int | None = None,
                    *, bled_target: np.ndarray | None = None, norm: str = "l1"):
    """Edge-bleed loss for the background render; ``bled_target`` skips recomputing the blur."""
    _check(target, mask, rgb)
    goal = background_target(target, mask, blur_radius) if bled_target is None else bled_target
    value, d_pred = _residual_loss(rgb - goal, norm)
    return value, d_pred, np.zeros(rgb.shape[:2])


def panoptic_loss(target: np.ndarray, rgb: np.ndarray, norm: str = "l1"):
    _check(target, rgb)
    value, d_pred = _residual_loss(rgb - target, norm)
    return value, d_pred, np.zeros(rgb.shape[:2])


def opacity_regularizer(h: np.ndarray, omega: np.ndarray, lambda_h: float = LAMBDA_H,
                        lambda_omega: float = LAMBDA_OMEGA):
    """lambda_h mean|1-h| + lambda_omega mean|omega|; returns (value, dL/dh, dL/domega)."""
    h = np.asarray(h, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if h.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    n = h.size
    value = lambda_h * np.abs(1.0 - h).mean() + lambda_omega * np.abs(omega).mean()
    return float(value), -lambda_h * np.sign(1.0 - h) / n, lambda_omega * np.sign(omega) / n


@dataclass
class LossReport:
    total: float = 0.0
    components: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: float, weight: float = 1.0) -> None:
        self.components[name] = self.components.get(name, 0.0) + float(value)
        self.total += weight * float(value)
