"""Foreground/background split of the initial point cloud and voxel resampling."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .scene_io import Camera, PointCloud, project_points

DEFAULT_TARGET = 50_000


def foreground_mask(pc: PointCloud, cams: Sequence[Camera], masks: Sequence[np.ndarray],
                    observed_only: bool = False) -> np.ndarray:
    """Boolean per point: inside the mask of every camera.

    A point that falls outside a camera's image counts against it.  With
    ``observed_only`` such cameras are skipped instead, so a point only needs
    to be seen by one camera and lie inside the mask of each camera that sees
    it.  That looser rule lets far-away points that happen to land in a
    single view's mask through, so it is off by default.
    """
    if len(masks) == 0:
        raise ValueError("at least one mask is required to split the point cloud")
    if len(cams) != len(masks):
        raise ValueError(f"{len(cams)} cameras but {len(masks)} masks")
    n = len(pc)
    seen = np.zeros(n, dtype=bool)
    vetoed = np.zeros(n, dtype=bool)
    for cam, mask in zip(cams, masks):
        mask = np.asarray(mask)
        if mask.shape != cam.shape:
            raise ValueError(f"camera {cam.id} is {cam.shape[0]}x{cam.shape[1]} but its mask is {mask.shape[0]}x{mask.shape[1]}")
        u, v, _, ok = project_points(cam, pc.positions)
        col = np.floor(np.where(ok, u, -1.0) + 0.5)
        row = np.floor(np.where(ok, v, -1.0) + 0.5)
        inside = ok & (col >= 0) & (col < cam.image_width) & (row >= 0) & (row < cam.image_height)
        idx = np.flatnonzero(inside)
        hit = mask[row[idx].astype(np.int64), col[idx].astype(np.int64)] > 0
        seen[idx] = True
        vetoed[idx[~hit]] = True
        if not observed_only:
            vetoed[~inside] = True
    return seen & ~vetoed


def split_point_cloud(pc: PointCloud, cams: Sequence[Camera], masks: Sequence[np.ndarray],
                      observed_only: bool = False):
    """Partition into (foreground, background) clouds; either may be ``None`` when empty."""
    fg = foreground_mask(pc, cams, masks, observed_only)
    fg_idx, bg_idx = np.flatnonzero(fg), np.flatnonzero(~fg)
    return (pc.subset(fg_idx) if len(fg_idx) else None,
            pc.subset(bg_idx) if len(bg_idx) else None)


def voxel_downsample(pc: PointCloud, edge: float) -> PointCloud:
    """One centroid (position and colour) per occupied voxel, voxels ordered lexicographically."""
    origin = pc.positions.min(axis=0)
    keys = np.floor((pc.positions - origin) / edge).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    pos = np.zeros((len(counts), 3))
    col = np.zeros((len(counts), 3))
    np.add.at(pos, inverse, pc.positions)
    np.add.at(col, inverse, pc.colors)
    return PointCloud(pos / counts[:, None], col / counts[:, None])


def _voxel_count(pc: PointCloud, edge: float) -> int:
    keys = np.floor((pc.positions - pc.positions.min(axis=0)) / edge).astype(np.int64)
    return len(np.unique(keys, axis=0))


def voxel_resample(pc: PointCloud, target_count: int, rng: np.random.Generator | None = None,
                   tolerance: float = 0.05) -> PointCloud:
    """Resample to within ``tolerance`` of ``target_count`` points.

    Larger clouds are voxel-downsampled with a bisected edge length; smaller
    clouds are grown by jittered duplication (half a voxel edge per axis).
    """
    if target_count < 1:
        raise ValueError("target_count must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(pc)
    lo_ok, hi_ok = target_count * (1 - tolerance), target_count * (1 + tolerance)
    if lo_ok <= n <= hi_ok:
        return pc
    span = pc.positions.max(axis=0) - pc.positions.min(axis=0)
    if n < target_count:
        extent = span[span > 0]
        if len(extent) == 0:
            raise ValueError("cannot upsample a cloud whose points are all identical")
        edge = float(np.prod(extent) ** (1.0 / len(extent))) / target_count ** (1.0 / len(extent))
        src = np.arange(target_count) % n
        jitter = rng.uniform(-0.5 * edge, 0.5 * edge, size=(target_count, 3))
        jitter[:n] = 0.0
        jitter[:, span == 0] = 0.0
        return PointCloud(pc.positions[src] + jitter, pc.colors[src])

    diag = float(np.linalg.norm(span))
    if diag == 0.0:
        return voxel_downsample(pc, 1.0)
    lo, hi = np.log(diag * 1e-7), np.log(diag * 1.01)
    best_above = None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        count = _voxel_count(pc, float(np.exp(mid)))
        if lo_ok <= count <= hi_ok:
            return voxel_downsample(pc, float(np.exp(mid)))
        if count > hi_ok:
            best_above = mid
            lo = mid
        else:
            hi = mid
    # Count jumps over the whole window: thin the finest overshooting grid evenly.
    cloud = voxel_downsample(pc, float(np.exp(best_above)) if best_above is not None else diag * 1e-7)
    keep = np.linspace(0, len(cloud) - 1, target_count).round().astype(np.int64)
    return cloud.subset(keep)
