"""Tile-binned alpha-compositing rasterizer with a hand-written adjoint.

Forward: splats are projected, binned into 16x16 tiles by a conservative
screen-space radius, sorted per tile by (depth, index), then blended
front-to-back per pixel until transmittance drops below 1e-4.

Backward: each pixel walks its splat list back-to-front, recovering
transmittance by division, and writes per-(tile, splat) partials into an
instance buffer.  A serial ordered reduction folds instances into
per-Gaussian gradients, so results do not depend on thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba as nb
import numpy as np

from .gaussians import ALPHA_MAX, Projected, SplatGrads, Splats, project_splats, project_splats_backward
from .scene_io import Camera

TILE = 16
T_EPSILON = 1e-4
# Splats are binned out to where their peak alpha falls below this value.
ALPHA_FLOOR = 2e-6
_UNBOUNDED = 1e7


@dataclass
class RenderOutput:
    rgb: np.ndarray     # (H, W, 3)
    alpha: np.ndarray   # (H, W)
    # retained for render_backward
    splats: Splats | None = None
    camera: Camera | None = None
    projected: Projected | None = None
    final_t: np.ndarray | None = None
    n_contrib: np.ndarray | None = None
    tile_ranges: np.ndarray | None = None
    tile_ids: np.ndarray | None = None
    sizes: tuple[int, ...] = ()
    packed: np.ndarray | None = None


def _as_splats(gaussians) -> tuple[Splats, tuple[int, ...]]:
    if isinstance(gaussians, Splats):
        return gaussians, (len(gaussians),)
    parts = list(gaussians)
    if not parts:
        return Splats.empty(), (0,)
    return Splats.concat(parts), tuple(len(p) for p in parts)


def _floor_reach(opacity: np.ndarray, alpha_floor: float) -> np.ndarray:
    """Mahalanobis distance at which a splat's alpha falls to ``alpha_floor``."""
    peak = np.minimum(opacity, ALPHA_MAX)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(2.0 * np.log(np.maximum(peak, alpha_floor) / alpha_floor))


def splat_extents(proj: Projected, extent_sigmas: float | None = None,
                  alpha_floor: float = ALPHA_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Screen-space half-widths ``(ex, ey)`` used for tile binning (0 means culled).

    By default this is the bounding box of the ellipse where the splat's
    alpha drops to ``alpha_floor``; ``extent_sigmas`` instead bins a circle
    of that many major standard deviations.  A non-positive floor bins every
    splat into every tile.
    """
    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    live = proj.valid & (proj.opacity_t > 0)
    if extent_sigmas is not None:
        lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        r = np.where(live, float(extent_sigmas) * np.sqrt(lam), 0.0)
        return r, r
    if alpha_floor <= 0:
        r = np.where(live, _UNBOUNDED, 0.0)
        return r, r
    reach = np.where(live, _floor_reach(proj.opacity_t, alpha_floor), 0.0)
    return reach * np.sqrt(a), reach * np.sqrt(c)


def bin_splats(proj: Projected, width: int, height: int, extent_sigmas: float | None = None,
               alpha_floor: float = ALPHA_FLOOR):
    """Sorted tile instances: ``(tile_ranges (n_tiles, 2), gaussian ids (M,))``."""
    tx_n, ty_n = -(-width // TILE), -(-height // TILE)
    n_tiles = tx_n * ty_n
    ex, ey = splat_extents(proj, extent_sigmas, alpha_floor)
    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    keep = (ex > 0) & (u + ex >= 0) & (u - ex <= width - 1) & (v + ey >= 0) & (v - ey <= height - 1)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return np.zeros((n_tiles, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    rx, ry = ex[idx], ey[idx]
    x0 = np.clip(np.floor((u[idx] - rx) / TILE), 0, tx_n - 1).astype(np.int64)
    x1 = np.clip(np.floor((u[idx] + rx) / TILE), 0, tx_n - 1).astype(np.int64)
    y0 = np.clip(np.floor((v[idx] - ry) / TILE), 0, ty_n - 1).astype(np.int64)
    y1 = np.clip(np.floor((v[idx] + ry) / TILE), 0, ty_n - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tiles = (y0[owner] + local // nx[owner]) * tx_n + x0[owner] + local % nx[owner]
    gid = idx[owner]
    order = np.lexsort((gid, proj.depths[gid], tiles))
    tiles, gid = tiles[order], gid[order]
    starts = np.searchsorted(tiles, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tiles, np.arange(n_tiles), side="right")
    return np.stack([starts, ends], axis=1).astype(np.int64), gid.astype(np.int64)


def _pack(proj: Projected, ids: np.ndarray, alpha_floor: float) -> np.ndarray:
    """Per-instance rows in tile order.

    Columns: u, v, Q00, Q01, Q11, opacity, r, g, b, then the exponent below
    which alpha < ``alpha_floor`` and the bounding box (u0, u1, v0, v1) of
    that level set.  Both are exact rejections of sub-floor contributions.
    """
    op = proj.opacity_t
    if alpha_floor > 0:
        with np.errstate(divide="ignore"):
            cut = np.log(alpha_floor / op)
        reach = _floor_reach(op, alpha_floor)
        ex, ey = reach * np.sqrt(proj.cov2d[:, 0, 0]), reach * np.sqrt(proj.cov2d[:, 1, 1])
    else:
        cut = np.full(len(op), -np.inf)
        ex = ey = np.full(len(op), np.inf)
    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    table = np.column_stack([u, v, proj.conics, op, proj.colors, cut, u - ex, u + ex, v - ey, v + ey])
    return np.ascontiguousarray(table[ids])


@nb.njit(parallel=True, cache=True)
def _blend_forward(packed, ranges, width, height, t_eps, rgb, final_t, n_contrib):
    tx_n = (width + TILE - 1) // TILE
    for tile in nb.prange(ranges.shape[0]):
        ty, tx = tile // tx_n, tile % tx_n
        start, end = ranges[tile, 0], ranges[tile, 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                count = 0
                for k in range(start, end):
                    if px < packed[k, 10] or px > packed[k, 11] or py < packed[k, 12] or py > packed[k, 13]:
                        continue
                    dx = px - packed[k, 0]
                    dy = py - packed[k, 1]
                    power = -0.5 * (packed[k, 2] * dx * dx + 2.0 * packed[k, 3] * dx * dy + packed[k, 4] * dy * dy)
                    if power < packed[k, 9]:
                        continue
                    a = packed[k, 5] * math.exp(power)
                    if a > 0.99:
                        a = 0.99
                    w = a * T
                    c0 += packed[k, 6] * w
                    c1 += packed[k, 7] * w
                    c2 += packed[k, 8] * w
                    T = T * (1.0 - a)
                    count = k - start + 1
                    if T < t_eps:
                        break
                rgb[py, px, 0] = c0
                rgb[py, px, 1] = c1
                rgb[py, px, 2] = c2
                final_t[py, px] = T
                n_contrib[py, px] = count


@nb.njit(parallel=True, cache=True)
def _blend_backward(packed, ranges, width, height, final_t, n_contrib, d_rgb, d_alpha, inst):
    # inst[k] accumulates: d_mean(2), d_conic(3), d_opac(1), d_color(3)
    tx_n = (width + TILE - 1) // TILE
    for tile in nb.prange(ranges.shape[0]):
        ty, tx = tile // tx_n, tile % tx_n
        start = ranges[tile, 0]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                T_final = final_t[py, px]
                T = T_final
                b0 = 0.0
                b1 = 0.0
                b2 = 0.0
                gr0 = d_rgb[py, px, 0]
                gr1 = d_rgb[py, px, 1]
                gr2 = d_rgb[py, px, 2]
                ga = d_alpha[py, px]
                for j in range(n_contrib[py, px] - 1, -1, -1):
                    k = start + j
                    if px < packed[k, 10] or px > packed[k, 11] or py < packed[k, 12] or py > packed[k, 13]:
                        continue
                    dx = px - packed[k, 0]
                    dy = py - packed[k, 1]
                    power = -0.5 * (packed[k, 2] * dx * dx + 2.0 * packed[k, 3] * dx * dy + packed[k, 4] * dy * dy)
                    if power < packed[k, 9]:
                        continue
                    gauss = math.exp(power)
                    raw = packed[k, 5] * gauss
                    a = raw if raw < 0.99 else 0.99
                    T_before = T / (1.0 - a)
                    w = a * T_before
                    inst[k, 6] += w * gr0
                    inst[k, 7] += w * gr1
                    inst[k, 8] += w * gr2
                    d_a = T_before * ((packed[k, 6] - b0) * gr0 + (packed[k, 7] - b1) * gr1 + (packed[k, 8] - b2) * gr2)
                    d_a += ga * T_final / (1.0 - a)
                    b0 = packed[k, 6] * a + (1.0 - a) * b0
                    b1 = packed[k, 7] * a + (1.0 - a) * b1
                    b2 = packed[k, 8] * a + (1.0 - a) * b2
                    T = T_before
                    if raw >= 0.99:
                        continue
                    inst[k, 5] += d_a * gauss
                    d_pow = d_a * raw
                    inst[k, 0] += d_pow * (packed[k, 2] * dx + packed[k, 3] * dy)
                    inst[k, 1] += d_pow * (packed[k, 3] * dx + packed[k, 4] * dy)
                    inst[k, 2] += -0.5 * d_pow * dx * dx
                    inst[k, 3] += -d_pow * dx * dy
                    inst[k, 4] += -0.5 * d_pow * dy * dy


@nb.njit(cache=True)
def _reduce_instances(ids, inst, out):
    for k in range(ids.shape[0]):
        g = ids[k]
        for j in range(inst.shape[1]):
            out[g, j] += inst[k, j]


def render(gaussians: Splats | Sequence[Splats], cam: Camera, t: float, *,
           legacy_opacity: bool = False, extent_sigmas: float | None = None,
           alpha_floor: float = ALPHA_FLOOR) -> RenderOutput:
    """Render one or more splat sets (merged before sorting) at time ``t``.

    A splat is ignored at pixels where its alpha would fall below
    ``alpha_floor``; pass 0 for an exact (slower) render.
    """
    splats, sizes = _as_splats(gaussians)
    h, w = cam.image_height, cam.image_width
    rgb = np.zeros((h, w, 3))
    final_t = np.ones((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    proj = project_splats(splats, cam, t, legacy_opacity)
    ranges, ids = bin_splats(proj, w, h, extent_sigmas, alpha_floor)
    packed = _pack(proj, ids, alpha_floor)
    if len(ids):
        _blend_forward(packed, ranges, w, h, T_EPSILON, rgb, final_t, n_contrib)
    return RenderOutput(rgb=rgb, alpha=1.0 - final_t, splats=splats, camera=cam, projected=proj,
                        final_t=final_t, n_contrib=n_contrib, tile_ranges=ranges, tile_ids=ids, sizes=sizes,
                        packed=packed)


def render_backward(out: RenderOutput, d_rgb: np.ndarray, d_alpha: np.ndarray | None = None) -> SplatGrads:
    """Gradients of a scalar loss w.r.t. every rendered ``Splats`` field."""
    if out.projected is None:
        raise ValueError("render output carries no backward state")
    h, w = out.alpha.shape
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
    if d_rgb.shape != (h, w, 3):
        raise ValueError(f"dL/dRGB has shape {d_rgb.shape}, expected {(h, w, 3)}")
    if d_alpha is None:
        d_alpha = np.zeros((h, w))
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_alpha.shape != (h, w):
        raise ValueError(f"dL/dAlpha has shape {d_alpha.shape}, expected {(h, w)}")
    n = len(out.splats)
    proj = out.projected
    acc = np.zeros((n, 9))
    if len(out.tile_ids):
        inst = np.zeros((len(out.tile_ids), 9))
        _blend_backward(out.packed, out.tile_ranges, w, h, out.final_t, out.n_contrib, d_rgb, d_alpha, inst)
        _reduce_instances(out.tile_ids, inst, acc)
    return project_splats_backward(out.splats, out.camera, proj, acc[:, 0:2], acc[:, 2:5], acc[:, 5], acc[:, 6:9])


def render_reference(gaussians: Splats | Sequence[Splats], cam: Camera, t: float, *,
                     legacy_opacity: bool = False) -> RenderOutput:
    """Brute-force oracle: every splat at every pixel, one global depth sort, no early exit."""
    splats, sizes = _as_splats(gaussians)
    h, w = cam.image_height, cam.image_width
    rgb = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    proj = project_splats(splats, cam, t, legacy_opacity)
    order = np.lexsort((np.arange(len(splats)), proj.depths))
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    for g in order:
        if not proj.valid[g]:
            continue
        dx = px - proj.means2d[g, 0]
        dy = py - proj.means2d[g, 1]
        qa, qb, qc = proj.conics[g]
        a = np.minimum(proj.opacity_t[g] * np.exp(-0.5 * (qa * dx * dx + 2 * qb * dx * dy + qc * dy * dy)), ALPHA_MAX)
        rgb += (a * trans)[..., None] * proj.colors[g]
        trans *= 1.0 - a
    return RenderOutput(rgb=rgb, alpha=1.0 - trans, sizes=sizes)
