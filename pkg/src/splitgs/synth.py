"""Synthetic dynamic scenes with analytic ground truth.

A recipe lists foreground blobs (each one Gaussian with an optional circular
orbit, linear drift and opacity pulse) in front of a static cylindrical shell
of flattened background Gaussians.  Cameras sit on a ring looking at the
origin; one extra camera between two training views is held out for testing.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import BACKGROUND, FOREGROUND, GaussianSet, Splats, logit
from .rasterizer import render_reference
from .scene_io import (Camera, Frame, PointCloud, look_at, save_image, save_mask, save_point_cloud,
                       write_scene_json)


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    color: tuple[float, float, float]
    scale: tuple[float, float, float] = (0.1, 0.1, 0.1)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    opacity: float = 0.95
    omega: float = 0.0
    mu: float = 0.5
    orbit_radius: float = 0.0
    orbit_phase: float = 0.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def position(self, t: float) -> np.ndarray:
        """Centre at time ``t``: drift plus one horizontal turn around ``center`` when orbiting."""
        p = np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)
        if self.orbit_radius:
            a = 2.0 * math.pi * t + self.orbit_phase
            p = p + self.orbit_radius * np.array([math.cos(a), 0.0, math.sin(a)])
        return p


@dataclass(frozen=True)
class Recipe:
    name: str
    foreground: tuple[Blob, ...]
    width: int = 64
    height: int = 64
    n_train: int = 8
    n_frames: int = 30
    ring_radius: float = 4.0
    camera_height: float = 0.8
    focal: float = 85.0
    shell_radius: float = 7.0
    shell_height: float = 10.0
    shell_rings: int = 6
    shell_segments: int = 28
    noise_fraction: float = 0.05
    spurious_fraction: float = 0.2

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError("images must be at least 8x8")
        if self.n_train < 1 or self.n_frames < 1:
            raise ValueError("need at least one training camera and one frame")
        if self.shell_rings < 1 or self.shell_segments < 3:
            raise ValueError("background shell needs at least one ring of three segments")
        if not self.shell_radius > self.ring_radius > 0:
            raise ValueError("background shell must enclose the camera ring")
        if self.noise_fraction < 0 or self.spurious_fraction < 0:
            raise ValueError("noise settings must be non-negative")
        for i, b in enumerate(self.foreground):
            if min(b.scale) <= 0:
                raise ValueError(f"blob {i}: scales must be positive")
            if not 0 < b.opacity <= 1:
                raise ValueError(f"blob {i}: opacity must lie in (0, 1]")
            if not all(0 <= c <= 1 for c in b.color):
                raise ValueError(f"blob {i}: colours must lie in [0, 1]")
            if not 0 <= b.mu <= 1:
                raise ValueError(f"blob {i}: mu must lie in [0, 1]")
            if np.hypot(*b.position(0.0)[[0, 2]]) + b.orbit_radius >= self.ring_radius:
                raise ValueError(f"blob {i} leaves the camera ring")


def orbit_recipe() -> Recipe:
    """Static cluster of blobs with one small group circling beside it."""
    static = (
        Blob((0.0, -0.35, 0.0), (0.85, 0.25, 0.2), (0.3, 0.12, 0.3)),
        Blob((0.25, -0.1, 0.15), (0.2, 0.7, 0.3), (0.14, 0.14, 0.14)),
        Blob((-0.25, -0.05, -0.1), (0.25, 0.35, 0.85), (0.15, 0.15, 0.15)),
        Blob((0.05, 0.2, -0.2), (0.9, 0.8, 0.2), (0.12, 0.12, 0.12)),
        Blob((-0.1, 0.1, 0.25), (0.8, 0.3, 0.75), (0.12, 0.12, 0.12)),
    )
    moving = tuple(
        Blob((0.0, 0.45 + 0.1 * k, 0.0), col, (0.1, 0.1, 0.1), orbit_radius=0.35, orbit_phase=0.4 * k)
        for k, col in enumerate([(0.95, 0.55, 0.1), (0.1, 0.8, 0.85), (0.95, 0.95, 0.95)])
    )
    return Recipe("orbit", static + moving)


def flame_recipe() -> Recipe:
    """A flat pan with short-lived rising pulses above it (fire-like transient texture)."""
    pan = (
        Blob((0.0, -0.45, 0.0), (0.35, 0.35, 0.4), (0.4, 0.05, 0.4)),
        Blob((0.0, -0.55, 0.0), (0.2, 0.2, 0.25), (0.2, 0.08, 0.2)),
    )
    rng = np.random.default_rng(1234)
    pulses = []
    for k in range(12):
        mu = float(np.clip(0.55 + 0.18 * rng.standard_normal(), 0.05, 0.95))
        x, z = rng.uniform(-0.2, 0.2, size=2)
        y = -0.3 + 0.07 * k
        heat = k / 11
        pulses.append(Blob((float(x), y, float(z)), (1.0, 0.75 - 0.45 * heat, 0.15), (0.11, 0.16, 0.11),
                           omega=5.0, mu=mu, velocity=(0.0, 0.3, 0.0)))
    return Recipe("flame", pan + tuple(pulses))


def static_recipe() -> Recipe:
    return dataclasses.replace(orbit_recipe(), name="static",
                               foreground=tuple(dataclasses.replace(b, orbit_radius=0.0)
                                                for b in orbit_recipe().foreground))


RECIPES = {"orbit": orbit_recipe, "flame": flame_recipe, "static": static_recipe}


def recipe_by_name(name: str) -> Recipe:
    try:
        return RECIPES[name]()
    except KeyError:
        raise ValueError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}") from None


# ---------------------------------------------------------- construction

def make_cameras(recipe: Recipe) -> list[Camera]:
    cams = []
    angles = [2 * math.pi * k / recipe.n_train for k in range(recipe.n_train)]
    angles.append(math.pi / recipe.n_train)  # test view halfway between the first two
    for k, a in enumerate(angles):
        eye = (recipe.ring_radius * math.sin(a), recipe.camera_height, recipe.ring_radius * math.cos(a))
        rot, trans = look_at(eye, (0.0, 0.0, 0.0))
        cams.append(Camera(recipe.width, recipe.height, recipe.focal, recipe.focal,
                           (recipe.width - 1) / 2, (recipe.height - 1) / 2, rot, trans, id=k,
                           role="test" if k == recipe.n_train else "train"))
    return cams


def background_shell(recipe: Recipe) -> GaussianSet:
    """Opaque flattened Gaussians tiling a cylinder, colours varying smoothly with angle and height."""
    theta = 2 * math.pi * (np.arange(recipe.shell_segments) + 0.5) / recipe.shell_segments
    ys = np.linspace(-recipe.shell_height / 2, recipe.shell_height / 2, recipe.shell_rings)
    th, yy = (a.reshape(-1) for a in np.meshgrid(theta, ys))
    pos = np.stack([recipe.shell_radius * np.sin(th), yy, recipe.shell_radius * np.cos(th)], axis=1)
    arc = 2 * math.pi * recipe.shell_radius / recipe.shell_segments
    step = recipe.shell_height / max(recipe.shell_rings - 1, 1)
    scales = np.tile(np.log([0.55 * arc, 0.55 * step, 0.08]), (len(pos), 1))
    cols = np.stack([0.5 + 0.3 * np.sin(th),
                     0.5 + 0.3 * np.cos(2 * th + yy / 3),
                     0.45 + 0.25 * np.sin(yy / 2 + th)], axis=1)
    g = GaussianSet.from_points(pos, cols, scales, tag=BACKGROUND, dtype=np.float64, opacity=1.0 - 1e-6)
    g.rotations = np.stack([np.cos(th / 2), np.zeros_like(th), np.sin(th / 2), np.zeros_like(th)], axis=1)
    return g


def _foreground_splats(recipe: Recipe, t: float) -> Splats:
    blobs = recipe.foreground
    if not blobs:
        return Splats.empty()
    return Splats(
        positions=np.stack([b.position(t) for b in blobs]),
        rotations=np.array([b.rotation for b in blobs], dtype=np.float64),
        log_scales=np.log(np.array([b.scale for b in blobs], dtype=np.float64)),
        colors=np.array([b.color for b in blobs], dtype=np.float64),
        opacity=np.array([b.opacity for b in blobs], dtype=np.float64),
        omega=np.array([b.omega for b in blobs], dtype=np.float64),
        mu=np.array([b.mu for b in blobs], dtype=np.float64),
    )


@dataclass
class SyntheticScene:
    """In-memory scene with the same read interface as a loaded ``Scene``."""

    recipe: Recipe
    cameras: list[Camera]
    frame_times: list[float]
    images: dict[tuple[int, int], np.ndarray]
    masks: dict[tuple[int, int], np.ndarray]
    background: GaussianSet
    initial_cloud: PointCloud
    initial_labels: np.ndarray  # 1 foreground, 0 background, -1 spurious
    extras: dict = field(default_factory=dict)

    @property
    def train_cameras(self) -> list[Camera]:
        return [c for c in self.cameras if c.role != "test"]

    @property
    def test_cameras(self) -> list[Camera]:
        return [c for c in self.cameras if c.role == "test"]

    def camera(self, cam_id: int) -> Camera:
        return next(c for c in self.cameras if c.id == cam_id)

    def times(self, cam_id: int) -> list[float]:
        return list(self.frame_times)

    def image(self, cam_id: int, k: int) -> np.ndarray:
        return self.images[cam_id, k]

    def mask0(self, cam_id: int) -> np.ndarray:
        return self.masks[cam_id, 0]

    def eval_mask(self, cam_id: int, k: int) -> np.ndarray:
        return self.masks[cam_id, k]

    def point_cloud(self) -> PointCloud:
        return self.initial_cloud

    def foreground_splats(self, t: float) -> Splats:
        return _foreground_splats(self.recipe, t)


def initial_point_cloud(recipe: Recipe, background: GaussianSet, rng: np.random.Generator):
    """Noisy ground-truth centres plus spurious points; returns (cloud, labels)."""
    fg = np.array([b.position(0.0) for b in recipe.foreground]).reshape(-1, 3)
    fg_cols = np.array([b.color for b in recipe.foreground]).reshape(-1, 3)
    bg = background.positions.astype(np.float64)
    parts, cols, labels = [], [], []
    for pos, col, label in ((fg, fg_cols, 1), (bg, background.colors, 0)):
        if len(pos) == 0:
            continue
        diag = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))
        sigma = recipe.noise_fraction * diag
        parts.append(pos + rng.normal(scale=sigma, size=pos.shape))
        cols.append(col)
        labels.append(np.full(len(pos), label))
    clean = np.concatenate(parts)
    n_spur = int(round(recipe.spurious_fraction * len(clean)))
    if n_spur:
        anchor = rng.integers(0, len(clean), size=n_spur)
        spread = 4 * recipe.noise_fraction * np.where(np.concatenate(labels)[anchor] == 1, 1.0,
                                                      recipe.shell_height * 0.2)[:, None]
        parts.append(clean[anchor] + rng.normal(size=(n_spur, 3)) * spread)
        cols.append(rng.uniform(0.0, 1.0, size=(n_spur, 3)))
        labels.append(np.full(n_spur, -1))
    return PointCloud(np.concatenate(parts), np.concatenate(cols)), np.concatenate(labels)


def make_scene(recipe: Recipe | str = "orbit", seed: int = 0) -> SyntheticScene:
    """Render every camera and frame with the brute-force rasteriser."""
    if isinstance(recipe, str):
        recipe = recipe_by_name(recipe)
    recipe.validate()
    rng = np.random.default_rng(seed)
    cams = make_cameras(recipe)
    bg = background_shell(recipe)
    bg_splats = bg.splats()
    times = [k / (recipe.n_frames - 1) if recipe.n_frames > 1 else 0.0 for k in range(recipe.n_frames)]
    images, masks = {}, {}
    for k, t in enumerate(times):
        fg_splats = _foreground_splats(recipe, t)
        for cam in cams:
            full = render_reference([fg_splats, bg_splats], cam, t)
            images[cam.id, k] = np.clip(full.rgb, 0.0, 1.0)
            if len(fg_splats):
                masks[cam.id, k] = render_reference(fg_splats, cam, t).alpha > 0.5
            else:
                masks[cam.id, k] = np.zeros(cam.shape, dtype=bool)
    cloud, labels = initial_point_cloud(recipe, bg, rng)
    return SyntheticScene(recipe, cams, times, images, masks, bg, cloud, labels)


def write_scene(scene: SyntheticScene, out_dir) -> Path:
    """Write cameras.json, PNG frames and masks, and points.ply in the loader's layout."""
    root = Path(out_dir)
    for sub in ("images", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = {}
    for cam in scene.cameras:
        fl = []
        for k, t in enumerate(scene.frame_times):
            img = f"images/cam{cam.id:02d}_{k:03d}.png"
            save_image(root / img, scene.images[cam.id, k])
            ev = f"masks/cam{cam.id:02d}_{k:03d}.png"
            save_mask(root / ev, scene.masks[cam.id, k])
            fl.append(Frame(t=t, image=img, mask=ev if k == 0 else None, eval_mask=ev))
        frames[cam.id] = fl
    write_scene_json(root, scene.cameras, frames)
    save_point_cloud(root / "points.ply", scene.initial_cloud)
    return root


def ground_truth_set(recipe: Recipe, t: float = 0.0) -> GaussianSet:
    """Foreground blobs at time ``t`` as a float64 ``GaussianSet`` (for tests and inspection)."""
    s = _foreground_splats(recipe, t)
    g = GaussianSet.from_points(s.positions, s.colors, s.log_scales, tag=FOREGROUND, dtype=np.float64)
    g.rotations = s.rotations
    g.opacity_logits = logit(np.clip(s.opacity, 1e-6, 1 - 1e-6))
    g.omega = s.omega
    g.mu = s.mu
    return g
