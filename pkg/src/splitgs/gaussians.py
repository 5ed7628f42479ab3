"""Gaussian parameter sets and the per-Gaussian half of splatting.

``GaussianSet`` holds trainable parameters in unconstrained form (log
scales, logit colors, logit peak opacity).  ``Splats`` is the decoded view
the rasterizer consumes; deformation fields produce ``Splats`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .scene_io import NEAR_PLANE, Camera

DILATION = 0.3
ALPHA_MAX = 0.99
GUARD_BAND = 1.3

FOREGROUND = "foreground"
BACKGROUND = "background"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Splats:
    """Decoded per-point parameters ready for projection.

    Rotations need not be unit length; they are normalised on read.
    """

    positions: np.ndarray   # (N, 3)
    rotations: np.ndarray   # (N, 4) as (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    colors: np.ndarray      # (N, 3) in [0, 1]
    opacity: np.ndarray     # (N,) peak opacity h
    omega: np.ndarray       # (N,)
    mu: np.ndarray          # (N,)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def concat(cls, parts: Sequence["Splats"]) -> "Splats":
        parts = list(parts)
        if len(parts) == 1:
            return parts[0]
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0), np.zeros(0))


@dataclass
class GaussianSet:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    color_logits: np.ndarray
    opacity_logits: np.ndarray
    omega: np.ndarray
    mu: np.ndarray
    tag: str = FOREGROUND

    PARAMS = ("positions", "rotations", "log_scales", "color_logits", "opacity_logits", "omega", "mu")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def from_points(cls, positions, colors, log_scales, tag=FOREGROUND, dtype=np.float32,
                    opacity=0.1, mu=0.5) -> "GaussianSet":
        """Initialise a set with identity rotations, zero bandwidth and the given peak opacity."""
        n = len(positions)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        cols = np.clip(np.asarray(colors, dtype=np.float64), 1e-3, 1 - 1e-3)
        return cls(
            positions=np.asarray(positions, dtype=dtype).reshape(n, 3).copy(),
            rotations=rot.astype(dtype),
            log_scales=np.asarray(log_scales, dtype=dtype).reshape(n, 3).copy(),
            color_logits=logit(cols).astype(dtype),
            opacity_logits=np.full(n, logit(opacity), dtype=dtype),
            omega=np.zeros(n, dtype=dtype),
            mu=np.full(n, mu, dtype=dtype),
            tag=tag,
        )

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    @property
    def peak_opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def splats(self, freeze_opacity: bool = False) -> Splats:
        """Decoded view.  ``freeze_opacity`` pins h=1, omega=0 (time-invariant, opaque)."""
        n = len(self)
        h = np.ones(n) if freeze_opacity else self.peak_opacity
        om = np.zeros(n) if freeze_opacity else self.omega.astype(np.float64)
        return Splats(
            positions=self.positions.astype(np.float64),
            rotations=self.rotations.astype(np.float64),
            log_scales=self.log_scales.astype(np.float64),
            colors=self.colors,
            opacity=h,
            omega=om,
            mu=np.clip(self.mu.astype(np.float64), 0.0, 1.0),
        )

    def raw_gradients(self, g: "SplatGrads", freeze_opacity: bool = False) -> dict[str, np.ndarray]:
        """Chain decoded-space gradients back to the stored parameters."""
        c = self.colors
        h = self.peak_opacity
        out = {
            "positions": g.positions,
            "rotations": g.rotations,
            "log_scales": g.log_scales,
            "color_logits": g.colors * c * (1.0 - c),
            "opacity_logits": g.opacity * h * (1.0 - h),
            "omega": g.omega,
            "mu": g.mu,
        }
        if freeze_opacity:
            out["opacity_logits"] = np.zeros_like(out["opacity_logits"])
            out["omega"] = np.zeros_like(out["omega"])
        return out

    def take(self, index) -> "GaussianSet":
        return replace(self, **{k: getattr(self, k)[index] for k in self.PARAMS})

    def append(self, other: "GaussianSet") -> "GaussianSet":
        return replace(self, **{k: np.concatenate([getattr(self, k), getattr(other, k)]) for k in self.PARAMS})

    def copy(self) -> "GaussianSet":
        return replace(self, **{k: getattr(self, k).copy() for k in self.PARAMS})


@dataclass
class SplatGrads:
    """Gradients congruent with ``Splats``; ``means2d`` carries screen-space position gradients."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity: np.ndarray
    omega: np.ndarray
    mu: np.ndarray
    means2d: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, n: int) -> "SplatGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n), np.zeros(n), np.zeros((n, 2)))

    def split(self, sizes: Sequence[int]) -> list["SplatGrads"]:
        cuts = np.cumsum(sizes)[:-1]
        parts = {f.name: np.split(getattr(self, f.name), cuts) for f in fields(self)}
        return [SplatGrads(**{k: v[i] for k, v in parts.items()}) for i in range(len(sizes))]


# ------------------------------------------------------------ rotations

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; normalises internally."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_backward(r: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalised) quaternion given dL/dR."""
    r = np.asarray(r, dtype=np.float64)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    q = r / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_rot
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dq = 2 * np.stack([
        -z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21,
        y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22,
        -2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22,
        -2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21,
    ], axis=-1)
    return (dq - q * np.sum(q * dq, axis=-1, keepdims=True)) / norm


# ----------------------------------------------------------- covariance

def build_covariance(r, s) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(s)).  Works on single items or batches."""
    rot = quat_to_rotmat(r)
    m = rot * np.exp(np.asarray(s, dtype=np.float64))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance_backward(r, s, d_cov) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dL/dr, dL/ds) for dL/dSigma; s is the log scale."""
    rot = quat_to_rotmat(r)
    scale = np.exp(np.asarray(s, dtype=np.float64))
    m = rot * scale[..., None, :]
    d_m = (d_cov + np.swapaxes(d_cov, -1, -2)) @ m
    d_scale = np.sum(d_m * rot, axis=-2)
    d_rot = d_m * scale[..., None, :]
    return rotmat_backward(r, d_rot), d_scale * scale


def _jacobians(cam: Camera, x_cam: np.ndarray) -> np.ndarray:
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    zeros = np.zeros_like(z)
    return np.stack([
        cam.fx / z, zeros, -cam.fx * x / (z * z),
        zeros, cam.fy / z, -cam.fy * y / (z * z),
    ], axis=-1).reshape(x_cam.shape[:-1] + (2, 3))


def project_covariance(cam: Camera, x, cov) -> np.ndarray:
    """Screen-space covariance J W Sigma W^T J^T plus the 0.3 px^2 dilation floor."""
    x = np.asarray(x, dtype=np.float64)
    x_cam = cam.to_camera(x.reshape(-1, 3)).reshape(x.shape)
    if np.any(x_cam[..., 2] <= NEAR_PLANE):
        raise ValueError("point is not in front of the near plane")
    t = _jacobians(cam, x_cam) @ cam.rotation
    return t @ np.asarray(cov, dtype=np.float64) @ np.swapaxes(t, -1, -2) + DILATION * np.eye(2)


def project_covariance_backward(cam: Camera, x, cov, d_cov2d) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dL/dx_world, dL/dSigma) for dL/dSigma'."""
    x = np.asarray(x, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    x_cam = cam.to_camera(x.reshape(-1, 3)).reshape(x.shape)
    jac = _jacobians(cam, x_cam)
    t = jac @ cam.rotation
    g = np.asarray(d_cov2d, dtype=np.float64)
    d_cov = np.swapaxes(t, -1, -2) @ g @ t
    d_t = (g + np.swapaxes(g, -1, -2)) @ t @ cov
    d_j = d_t @ cam.rotation.T
    d_xcam = _jacobian_backward(cam, x_cam, d_j)
    return d_xcam @ cam.rotation, d_cov


def _jacobian_backward(cam: Camera, x_cam: np.ndarray, d_j: np.ndarray) -> np.ndarray:
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    fx, fy = cam.fx, cam.fy
    z2, z3 = z * z, z * z * z
    dx = -fx / z2 * d_j[..., 0, 2]
    dy = -fy / z2 * d_j[..., 1, 2]
    dz = (-fx / z2 * d_j[..., 0, 0] + 2 * fx * x / z3 * d_j[..., 0, 2]
          - fy / z2 * d_j[..., 1, 1] + 2 * fy * y / z3 * d_j[..., 1, 2])
    return np.stack([dx, dy, dz], axis=-1)


# ------------------------------------------------------------- opacity

def temporal_opacity(h, omega, mu, t, legacy: bool = False):
    """h * exp(-omega^2 |t - mu|^2); ``legacy`` uses the unsquared h * exp(omega |t - mu|^2)."""
    h = np.asarray(h, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    dt2 = (t - np.asarray(mu, dtype=np.float64)) ** 2
    rate = omega if legacy else -omega * omega
    return h * np.exp(rate * dt2)


def temporal_opacity_backward(h, omega, mu, t, d_sigma, legacy: bool = False):
    """Gradients (dL/dh, dL/domega, dL/dmu)."""
    h = np.asarray(h, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    diff = t - np.asarray(mu, dtype=np.float64)
    if legacy:
        e = np.exp(omega * diff * diff)
        sig = h * e
        return d_sigma * e, d_sigma * sig * diff * diff, d_sigma * sig * omega * (-2.0 * diff)
    e = np.exp(-omega * omega * diff * diff)
    sig = h * e
    return d_sigma * e, d_sigma * sig * (-2.0 * omega * diff * diff), d_sigma * sig * (2.0 * omega * omega * diff)


def splat_alpha(opacity_t, cov2d, d) -> np.ndarray:
    """Per-pixel alpha: opacity * exp(-0.5 d^T Sigma'^-1 d), clamped to [0, 0.99]."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    det = cov2d[..., 0, 0] * cov2d[..., 1, 1] - cov2d[..., 0, 1] * cov2d[..., 1, 0]
    if np.any(det <= 0):
        raise ArithmeticError("screen-space covariance is not positive definite")
    inv = np.linalg.inv(cov2d)
    power = -0.5 * np.einsum("...i,...ij,...j->...", d, inv, d)
    return np.clip(np.asarray(opacity_t) * np.exp(power), 0.0, ALPHA_MAX)


def splat_alpha_backward(opacity_t, cov2d, d, d_alpha):
    """Gradients (dL/dopacity, dL/dSigma', dL/dd); zero where the clamp is active."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    inv = np.linalg.inv(cov2d)
    gauss = np.exp(-0.5 * np.einsum("...i,...ij,...j->...", d, inv, d))
    raw = np.asarray(opacity_t) * gauss
    live = (raw < ALPHA_MAX).astype(np.float64) * d_alpha
    d_power = live * raw
    inv_d = np.einsum("...ij,...j->...i", inv, d)
    d_cov = 0.5 * d_power[..., None, None] * (inv_d[..., :, None] * inv_d[..., None, :])
    return live * gauss, d_cov, -d_power[..., None] * inv_d


# ---------------------------------------------------------- projection

@dataclass
class Projected:
    """Screen-space splats for one camera and time (the columnar Splat2D)."""

    means2d: np.ndarray   # (N, 2)
    cov2d: np.ndarray     # (N, 2, 2)
    conics: np.ndarray    # (N, 3): inverse covariance entries (a, b, c)
    depths: np.ndarray    # (N,)
    opacity_t: np.ndarray  # (N,)
    colors: np.ndarray    # (N, 3)
    valid: np.ndarray     # (N,) bool: in front of the near plane and inside the guard band
    # cached for the backward pass
    x_cam: np.ndarray
    cov3d: np.ndarray
    t: float
    legacy: bool


def project_splats(splats: Splats, cam: Camera, t: float, legacy_opacity: bool = False) -> Projected:
    n = len(splats)
    x_cam = cam.to_camera(splats.positions) if n else np.zeros((0, 3))
    z = x_cam[:, 2]
    valid = z > NEAR_PLANE
    # Guard band: centres far outside the view would otherwise smear huge footprints across it.
    lim_x = GUARD_BAND * max(cam.cx, cam.image_width - cam.cx) / cam.fx
    lim_y = GUARD_BAND * max(cam.cy, cam.image_height - cam.cy) / cam.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        valid &= (np.abs(x_cam[:, 0]) < lim_x * z) & (np.abs(x_cam[:, 1]) < lim_y * z)
    safe = x_cam.copy()
    safe[~valid] = (0.0, 0.0, 1.0)
    zs = safe[:, 2]
    means = np.stack([cam.fx * safe[:, 0] / zs + cam.cx, cam.fy * safe[:, 1] / zs + cam.cy], axis=1)
    cov3d = build_covariance(splats.rotations, splats.log_scales) if n else np.zeros((0, 3, 3))
    tm = _jacobians(cam, safe) @ cam.rotation
    cov2d = tm @ cov3d @ np.swapaxes(tm, -1, -2) + DILATION * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    op = temporal_opacity(splats.opacity, splats.omega, splats.mu, t, legacy=legacy_opacity)
    return Projected(means, cov2d, conics, z.copy(), op, np.asarray(splats.colors, dtype=np.float64),
                     valid, safe, cov3d, float(t), bool(legacy_opacity))


def project_splats_backward(splats: Splats, cam: Camera, proj: Projected,
                            d_means: np.ndarray, d_conics: np.ndarray,
                            d_opacity_t: np.ndarray, d_colors: np.ndarray) -> SplatGrads:
    """Chain screen-space gradients back to ``Splats`` fields.

    ``d_conics`` holds dL/d(Q00, Q01, Q11) of the symmetric inverse covariance
    with Q01 counted once (the caller sums both off-diagonal entries).
    """
    n = len(splats)
    out = SplatGrads.zeros(n)
    if n == 0:
        return out
    v = proj.valid
    x_cam = proj.x_cam
    fx, fy = cam.fx, cam.fy
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]

    # inverse covariance -> covariance
    q = np.empty((n, 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 1], proj.conics[:, 2]
    gq = np.empty((n, 2, 2))
    gq[:, 0, 0] = d_conics[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * d_conics[:, 1]
    gq[:, 1, 1] = d_conics[:, 2]
    d_cov2d = -q @ gq @ q

    jac = _jacobians(cam, x_cam)
    tm = jac @ cam.rotation
    d_cov3d = np.swapaxes(tm, -1, -2) @ d_cov2d @ tm
    d_t = (d_cov2d + np.swapaxes(d_cov2d, -1, -2)) @ tm @ proj.cov3d
    d_xcam = _jacobian_backward(cam, x_cam, d_t @ cam.rotation.T)

    dmu, dmv = d_means[:, 0], d_means[:, 1]
    d_xcam[:, 0] += dmu * fx / z
    d_xcam[:, 1] += dmv * fy / z
    d_xcam[:, 2] += -dmu * fx * x / (z * z) - dmv * fy * y / (z * z)

    d_rot, d_ls = build_covariance_backward(splats.rotations, splats.log_scales, d_cov3d)
    d_h, d_om, d_mu = temporal_opacity_backward(splats.opacity, splats.omega, splats.mu, proj.t,
                                                d_opacity_t, legacy=proj.legacy)
    mask = v[:, None]
    out.positions = np.where(mask, d_xcam @ cam.rotation, 0.0)
    out.rotations = np.where(mask, d_rot, 0.0)
    out.log_scales = np.where(mask, d_ls, 0.0)
    out.colors = np.where(mask, d_colors, 0.0)
    out.opacity = np.where(v, d_h, 0.0)
    out.omega = np.where(v, d_om, 0.0)
    out.mu = np.where(v, d_mu, 0.0)
    out.means2d = np.where(mask, d_means, 0.0)
    return out
