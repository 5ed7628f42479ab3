"""Hex-plane deformation fields.

Six feature planes (XY, XZ, YZ, XT, YT, ZT) are bilinearly sampled at a
point's normalised (x, y, z, t) coordinate and multiplied channel-wise.  A
shared one-hidden-layer trunk decodes the feature; one linear head per
predicted delta sits on top.  Foreground fields carry position, rotation
and colour heads, background fields only a position head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .gaussians import BACKGROUND, FOREGROUND, GaussianSet, Splats

PLANES = ("XY", "XZ", "YZ", "XT", "YT", "ZT")
_AXES = {"X": 0, "Y": 1, "Z": 2, "T": 3}
HEAD_SIZES = {"dx": 3, "dr": 4, "dc": 3}
UNIFIED = "unified"
VARIANT_HEADS = {FOREGROUND: ("dx", "dr", "dc"), BACKGROUND: ("dx",), UNIFIED: ("dx", "dr", "dc")}


@dataclass
class PlaneGrid:
    name: str
    values: np.ndarray  # (J, K, L)

    def __post_init__(self):
        if self.name not in PLANES:
            raise ValueError(f"unknown plane {self.name!r}")
        if self.values.ndim != 3 or min(self.values.shape[:2]) < 2:
            raise ValueError(f"plane {self.name} needs a J x K x L grid with J, K >= 2")

    @property
    def axes(self) -> tuple[int, int]:
        return _AXES[self.name[0]], _AXES[self.name[1]]


@dataclass
class DeformationField:
    planes: list[PlaneGrid]
    trunk_w: np.ndarray
    trunk_b: np.ndarray
    heads: dict[str, tuple[np.ndarray, np.ndarray]]
    box_min: np.ndarray
    box_max: np.ndarray
    variant: str = FOREGROUND

    def __post_init__(self):
        if [p.name for p in self.planes] != list(PLANES):
            raise ValueError("a deformation field needs exactly the six planes in canonical order")
        if len({p.values.shape[2] for p in self.planes}) != 1:
            raise ValueError("all planes must share the feature size")
        if not np.all(np.asarray(self.box_max) > np.asarray(self.box_min)):
            raise ValueError("normalisation box must have positive extent on every axis")
        if self.variant not in VARIANT_HEADS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if tuple(self.heads) != VARIANT_HEADS[self.variant]:
            raise ValueError(f"{self.variant} field needs heads {VARIANT_HEADS[self.variant]}, got {tuple(self.heads)}")

    @property
    def feature_size(self) -> int:
        return self.planes[0].values.shape[2]

    @classmethod
    def create(cls, positions: np.ndarray, variant: str = FOREGROUND, *, resolution: int = 64,
               time_resolution: int = 32, features: int = 16, hidden: int = 64,
               rng: np.random.Generator | None = None, dtype=np.float32) -> "DeformationField":
        """Fresh field sized to the bounding box of ``positions``; decodes to zero deltas."""
        rng = np.random.default_rng(0) if rng is None else rng
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        pad = np.maximum(0.05 * (hi - lo), 1e-3)
        planes = []
        for name in PLANES:
            shape = tuple(time_resolution if a == "T" else resolution for a in name) + (features,)
            vals = np.ones(shape)
            if "T" in name:
                vals += rng.uniform(-1e-2, 1e-2, size=shape)
            planes.append(PlaneGrid(name, vals.astype(dtype)))
        bound = 1.0 / np.sqrt(features)
        trunk_w = rng.uniform(-bound, bound, size=(features, hidden)).astype(dtype)
        trunk_b = np.zeros(hidden, dtype=dtype)
        heads = {k: (np.zeros((hidden, HEAD_SIZES[k]), dtype=dtype), np.zeros(HEAD_SIZES[k], dtype=dtype))
                 for k in VARIANT_HEADS[variant]}
        return cls(planes, trunk_w, trunk_b, heads, (lo - pad).astype(dtype), (hi + pad).astype(dtype), variant)

    def parameters(self) -> dict[str, np.ndarray]:
        return field_parameters(self)

    def copy(self) -> "DeformationField":
        return DeformationField(
            [PlaneGrid(p.name, p.values.copy()) for p in self.planes],
            self.trunk_w.copy(), self.trunk_b.copy(),
            {k: (w.copy(), b.copy()) for k, (w, b) in self.heads.items()},
            np.array(self.box_min), np.array(self.box_max), self.variant,
        )


def field_parameters(fld: DeformationField) -> dict[str, np.ndarray]:
    """Every trainable array by stable name (the arrays themselves, not copies)."""
    out = {f"plane_{p.name}": p.values for p in fld.planes}
    out["trunk_w"] = fld.trunk_w
    out["trunk_b"] = fld.trunk_b
    for k, (w, b) in fld.heads.items():
        out[f"head_{k}_w"] = w
        out[f"head_{k}_b"] = b
    return out


def set_field_parameters(fld: DeformationField, params: dict[str, np.ndarray]) -> None:
    for p in fld.planes:
        p.values = params[f"plane_{p.name}"]
    fld.trunk_w = params["trunk_w"]
    fld.trunk_b = params["trunk_b"]
    fld.heads = {k: (params[f"head_{k}_w"], params[f"head_{k}_b"]) for k in fld.heads}


# ------------------------------------------------------------- sampling

@nb.njit(cache=True)
def _bilerp(values, ua, ub, out, d_ua, d_ub):
    ja, jb = values.shape[0], values.shape[1]
    for n in range(ua.shape[0]):
        pa = ua[n] * (ja - 1)
        pb = ub[n] * (jb - 1)
        i0 = min(int(np.floor(pa)), ja - 2)
        k0 = min(int(np.floor(pb)), jb - 2)
        fa = pa - i0
        fb = pb - k0
        for l in range(values.shape[2]):
            v00 = values[i0, k0, l]
            v10 = values[i0 + 1, k0, l]
            v01 = values[i0, k0 + 1, l]
            v11 = values[i0 + 1, k0 + 1, l]
            out[n, l] = (1 - fa) * (1 - fb) * v00 + fa * (1 - fb) * v10 + (1 - fa) * fb * v01 + fa * fb * v11
            d_ua[n, l] = ((1 - fb) * (v10 - v00) + fb * (v11 - v01)) * (ja - 1)
            d_ub[n, l] = ((1 - fa) * (v01 - v00) + fa * (v11 - v10)) * (jb - 1)


@nb.njit(cache=True)
def _bilerp_scatter(grad, ua, ub, g):
    ja, jb = grad.shape[0], grad.shape[1]
    for n in range(ua.shape[0]):
        pa = ua[n] * (ja - 1)
        pb = ub[n] * (jb - 1)
        i0 = min(int(np.floor(pa)), ja - 2)
        k0 = min(int(np.floor(pb)), jb - 2)
        fa = pa - i0
        fb = pb - k0
        for l in range(grad.shape[2]):
            gl = g[n, l]
            grad[i0, k0, l] += (1 - fa) * (1 - fb) * gl
            grad[i0 + 1, k0, l] += fa * (1 - fb) * gl
            grad[i0, k0 + 1, l] += (1 - fa) * fb * gl
            grad[i0 + 1, k0 + 1, l] += fa * fb * gl


def normalize_points(fld: DeformationField, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """(N, 4) coordinates in [0, 1] plus an (N, 3) mask of axes that were not clamped."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(fld.box_min, dtype=np.float64)
    hi = np.asarray(fld.box_max, dtype=np.float64)
    raw = (x - lo) / (hi - lo)
    inside = (raw >= 0.0) & (raw <= 1.0)
    q = np.empty((len(x), 4))
    q[:, :3] = np.clip(raw, 0.0, 1.0)
    q[:, 3] = min(max(float(t), 0.0), 1.0)
    return q, inside


@dataclass
class FeatureTape:
    q: np.ndarray
    inside: np.ndarray
    per_plane: list[np.ndarray]
    d_coord: list[tuple[np.ndarray, np.ndarray]]
    feature: np.ndarray


def sample_features(fld: DeformationField, x: np.ndarray, t: float) -> FeatureTape:
    q, inside = normalize_points(fld, x, t)
    n, L = len(q), fld.feature_size
    per_plane, d_coord = [], []
    feat = np.ones((n, L))
    for p in fld.planes:
        a, b = p.axes
        vals = np.empty((n, L))
        da = np.empty((n, L))
        db = np.empty((n, L))
        _bilerp(p.values.astype(np.float64, copy=False), np.ascontiguousarray(q[:, a]),
                np.ascontiguousarray(q[:, b]), vals, da, db)
        per_plane.append(vals)
        d_coord.append((da, db))
        feat = feat * vals
    return FeatureTape(q, inside, per_plane, d_coord, feat)


def sample_feature(fld: DeformationField, x, t: float) -> np.ndarray:
    """Multiplied hex-plane feature(s); a single 3-vector gives an L-vector."""
    x = np.asarray(x, dtype=np.float64)
    feat = sample_features(fld, x.reshape(-1, 3), t).feature
    return feat[0] if x.ndim == 1 else feat


def _others_product(per_plane: list[np.ndarray], skip: int) -> np.ndarray:
    out = np.ones_like(per_plane[0])
    for i, v in enumerate(per_plane):
        if i != skip:
            out = out * v
    return out


def features_backward(fld: DeformationField, tape: FeatureTape, d_feat: np.ndarray):
    """Scatter dL/dfeature into per-plane gradients; also returns dL/dx (world)."""
    grads = {}
    d_q = np.zeros((len(tape.q), 4))
    for i, p in enumerate(fld.planes):
        a, b = p.axes
        g = d_feat * _others_product(tape.per_plane, i)
        acc = np.zeros(p.values.shape)
        _bilerp_scatter(acc, np.ascontiguousarray(tape.q[:, a]), np.ascontiguousarray(tape.q[:, b]),
                        np.ascontiguousarray(g))
        grads[f"plane_{p.name}"] = acc
        da, db = tape.d_coord[i]
        d_q[:, a] += np.sum(g * da, axis=1)
        d_q[:, b] += np.sum(g * db, axis=1)
    span = np.asarray(fld.box_max, dtype=np.float64) - np.asarray(fld.box_min, dtype=np.float64)
    d_x = np.where(tape.inside, d_q[:, :3] / span, 0.0)
    return grads, d_x


# -------------------------------------------------------------- decoding

@dataclass
class DeformTape:
    t: float
    features: FeatureTape
    hidden_pre: np.ndarray
    hidden: np.ndarray
    deltas: dict[str, np.ndarray]
    color_live: np.ndarray | None
    n: int


def decode(fld: DeformationField, feature: np.ndarray):
    pre = feature @ fld.trunk_w.astype(np.float64) + fld.trunk_b
    hid = np.maximum(pre, 0.0)
    deltas = {k: hid @ w.astype(np.float64) + b for k, (w, b) in fld.heads.items()}
    return pre, hid, deltas


def deform(fld: DeformationField, g: GaussianSet | Splats, t: float, *, tag: str | None = None,
           freeze_opacity: bool = False, return_tape: bool = False):
    """Deformed ``Splats`` at time ``t``; untouched fields pass through unchanged.

    Rotations are returned as ``r + dr``; every consumer normalises on read,
    which keeps a zero delta bit-exact.
    """
    if isinstance(g, GaussianSet):
        tag = g.tag
        base = g.splats(freeze_opacity=freeze_opacity)
    else:
        base = g
    if fld.variant != UNIFIED and tag is not None and tag != fld.variant:
        raise ValueError(f"{fld.variant} field cannot deform a {tag} set")
    ft = sample_features(fld, base.positions, t)
    pre, hid, deltas = decode(fld, ft.feature)
    out = Splats(base.positions + deltas["dx"], base.rotations, base.log_scales, base.colors,
                 base.opacity, base.omega, base.mu)
    live = None
    if "dr" in deltas:
        out.rotations = base.rotations + deltas["dr"]
    if "dc" in deltas:
        moved = base.colors + deltas["dc"]
        live = (moved > 0.0) & (moved < 1.0)
        out.colors = np.clip(moved, 0.0, 1.0)
    if not return_tape:
        return out
    return out, DeformTape(float(t), ft, pre, hid, deltas, live, len(base))


def deform_backward(fld: DeformationField, tape: DeformTape, d_positions: np.ndarray,
                    d_rotations: np.ndarray | None = None, d_colors: np.ndarray | None = None):
    """Backprop deformed-space gradients.

    Returns ``(field_grads, point_grads)`` where ``point_grads`` maps
    ``positions`` / ``rotations`` / ``colors`` to gradients on the canonical
    (decoded) values.
    """
    d_out = {"dx": np.asarray(d_positions, dtype=np.float64)}
    point = {"positions": d_out["dx"].copy(),
             "rotations": None if d_rotations is None else np.asarray(d_rotations, dtype=np.float64),
             "colors": None if d_colors is None else np.asarray(d_colors, dtype=np.float64)}
    if "dr" in fld.heads:
        d_out["dr"] = np.zeros((tape.n, 4)) if d_rotations is None else point["rotations"]
    if "dc" in fld.heads:
        dc = np.zeros((tape.n, 3)) if d_colors is None else np.where(tape.color_live, d_colors, 0.0)
        d_out["dc"] = dc
        point["colors"] = dc
    grads = {}
    d_hid = np.zeros_like(tape.hidden)
    for k, (w, _) in fld.heads.items():
        grads[f"head_{k}_w"] = tape.hidden.T @ d_out[k]
        grads[f"head_{k}_b"] = d_out[k].sum(axis=0)
        d_hid += d_out[k] @ w.astype(np.float64).T
    d_pre = d_hid * (tape.hidden_pre > 0)
    grads["trunk_w"] = tape.features.feature.T @ d_pre
    grads["trunk_b"] = d_pre.sum(axis=0)
    d_feat = d_pre @ fld.trunk_w.astype(np.float64).T
    plane_grads, d_x = features_backward(fld, tape.features, d_feat)
    grads.update(plane_grads)
    point["positions"] += d_x
    return grads, point
