"""Reference-free foreground densification.

Points are ranked by how far their deformed position wanders from its
temporal mean; the most mobile tenth is duplicated.  Canonical-stage events
duplicate every foreground point.
"""

from __future__ import annotations

import math

import numpy as np

from .gaussians import GaussianSet, quat_to_rotmat
from .hexplane import DeformationField, deform

DISPLACEMENT_STEPS = 10
DYNAMIC_FRACTION = 0.1


def sample_times(steps: int = DISPLACEMENT_STEPS) -> np.ndarray:
    return np.linspace(0.0, 1.0, steps)


def displacement_stats(fld: DeformationField, g: GaussianSet, steps: int = DISPLACEMENT_STEPS) -> np.ndarray:
    """Mean distance of each deformed position from its own temporal centroid."""
    if fld.variant == "background":
        raise ValueError("displacement statistics need a foreground field")
    tracks = np.stack([deform(fld, g, t).positions for t in sample_times(steps)])  # (T, N, 3)
    return mean_displacement(tracks)


def mean_displacement(tracks: np.ndarray) -> np.ndarray:
    # offsets from the first sample keep static points at exactly zero
    offsets = tracks - tracks[:1]
    return np.linalg.norm(offsets - offsets.mean(axis=0), axis=-1).mean(axis=0)


def _jittered_copies(g: GaussianSet, index: np.ndarray, rng: np.random.Generator) -> GaussianSet:
    clones = g.take(index)
    half = 0.5 * np.exp(clones.log_scales.astype(np.float64))
    offset = rng.uniform(-1.0, 1.0, size=half.shape) * half
    clones.positions = (clones.positions + offset).astype(g.positions.dtype)
    return clones


def select_dynamic(scores: np.ndarray, fraction: float = DYNAMIC_FRACTION) -> np.ndarray:
    """Indices of the ceil(fraction * N) largest scores; ties resolved by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    k = math.ceil(fraction * len(scores))
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:k])


def densify_dynamic(g: GaussianSet, scores: np.ndarray, rng: np.random.Generator,
                    fraction: float = DYNAMIC_FRACTION) -> tuple[GaussianSet, np.ndarray]:
    """Duplicate the most mobile points; returns the enlarged set and the parent indices."""
    if len(g) < 10:
        raise ValueError(f"dynamic densification needs at least 10 points, got {len(g)}")
    if len(scores) != len(g):
        raise ValueError("one displacement score per point is required")
    picked = select_dynamic(scores, fraction)
    return g.append(_jittered_copies(g, picked, rng)), picked


def densify_canonical(g: GaussianSet, rng: np.random.Generator) -> tuple[GaussianSet, np.ndarray]:
    picked = np.arange(len(g))
    return g.append(_jittered_copies(g, picked, rng)), picked


def estimate_final_count(n_start: int, n_c: int, n_d: int) -> int:
    """Foreground count after n_c canonical doublings then n_d ten-percent events."""
    if min(n_start, n_c, n_d) < 0:
        raise ValueError("counts must be non-negative")
    n = n_start * 2 ** n_c
    for _ in range(n_d):
        n += math.ceil(DYNAMIC_FRACTION * n)
    return n


def prune_low_opacity(g: GaussianSet, threshold: float = 0.005) -> tuple[GaussianSet, np.ndarray]:
    keep = np.flatnonzero(g.peak_opacity >= threshold)
    return g.take(keep), keep


def gradient_threshold_densify(g: GaussianSet, grad_norm: np.ndarray, rng: np.random.Generator,
                               threshold: float = 2e-4, scene_extent: float = 1.0,
                               percent_dense: float = 0.01) -> tuple[GaussianSet, np.ndarray, np.ndarray]:
    """Clone/split by accumulated screen-space gradient (the classic adaptive density rule).

    Small high-gradient points are cloned in place; large ones are replaced
    by two samples drawn from themselves with scales divided by 1.6.
    Returns ``(new_set, kept_index, parent_index_of_new_points)``.
    """
    hot = np.asarray(grad_norm) >= threshold
    big = np.exp(g.log_scales.astype(np.float64)).max(axis=1) > percent_dense * scene_extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    parts = [g.take(clone)]
    parents = [clone]
    if len(split):
        base = g.take(np.repeat(split, 2))
        std = np.exp(base.log_scales.astype(np.float64))
        local = rng.normal(size=std.shape) * std
        rot = quat_to_rotmat(base.rotations)
        base.positions = (base.positions + np.einsum("nij,nj->ni", rot, local)).astype(g.positions.dtype)
        base.log_scales = (base.log_scales - np.log(1.6)).astype(g.log_scales.dtype)
        parts.append(base)
        parents.append(np.repeat(split, 2))
    keep = np.setdiff1d(np.arange(len(g)), split)
    out = g.take(keep)
    for p in parts:
        out = out.append(p)
    return out, keep, np.concatenate(parents)
