"""Two-stage optimisation: canonical pre-training at t=0, then dynamic training."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import checkpoint
from .densify import (densify_canonical, densify_dynamic, displacement_stats, gradient_threshold_densify,
                      prune_low_opacity)
from .gaussians import BACKGROUND, FOREGROUND, GaussianSet, SplatGrads, Splats
from .hexplane import UNIFIED, DeformationField, PlaneGrid, deform, deform_backward, field_parameters
from .losses import (LossReport, background_loss, background_target, foreground_loss, opacity_regularizer,
                     panoptic_loss)
from .rasterizer import RenderOutput, render, render_backward
from .scene_io import Camera, PointCloud, scene_extent
from .segmentation import split_point_cloud, voxel_resample

log = logging.getLogger(__name__)

CANONICAL = "canonical"
DYNAMIC = "dynamic"


class TrainingData(Protocol):
    cameras: list[Camera]

    @property
    def train_cameras(self) -> list[Camera]: ...

    def times(self, cam_id: int) -> list[float]: ...

    def image(self, cam_id: int, k: int) -> np.ndarray: ...

    def mask0(self, cam_id: int) -> np.ndarray: ...


@dataclass
class TrainConfig:
    canonical_iters: int = 3000
    dynamic_iters: int = 7000
    lr_positions: float = 1.6e-4
    lr_positions_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_colors: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_planes: float = 1.6e-2
    lr_heads: float = 1.6e-3
    lambda_h: float = 0.1
    lambda_omega: float = 1.0
    fg_points: int = 500
    bg_points: int = 1500
    canonical_densify_at: tuple[float, ...] = (0.4, 0.8)
    dynamic_densify_events: int = 3
    prune_threshold: float = 0.0
    grad_threshold: float = 2e-4
    unified_field: bool = False
    legacy_canonical: bool = False
    legacy_densify: bool = False
    legacy_opacity: bool = False
    freeze_background_opacity: bool = False
    plane_resolution: int = 64
    time_resolution: int = 32
    features: int = 16
    hidden: int = 64
    loss_norm: str = "l1"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.canonical_iters < 0 or self.dynamic_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        self.canonical_densify_at = tuple(float(v) for v in self.canonical_densify_at)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["canonical_densify_at"] = list(self.canonical_densify_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, items: Sequence[str]) -> "TrainConfig":
        d = self.to_dict()
        for item in items:
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"override {item!r} is not key=value")
            d[key] = _parse_value(self, key, value.strip())
        return TrainConfig.from_dict(d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read ``key = value`` lines; ``#`` starts a comment, tuples are comma separated."""
        items = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            items.append(line)
        return cls().with_overrides(items)


def _parse_value(cfg: TrainConfig, key: str, text: str):
    types = {f.name: f.type for f in dataclasses.fields(cfg)}
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    current = getattr(cfg, key)
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(current, tuple):
        return tuple(float(v) for v in text.split(",") if v.strip())
    return type(current)(text)


# ------------------------------------------------------------ optimiser

class Adam:
    """Per-array Adam with float32 moment storage (so checkpoints resume exactly)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(param.shape, dtype=np.float32)
            self.v[name] = np.zeros(param.shape, dtype=np.float32)
            self.steps[name] = 0
        k = self.steps[name] + 1
        m = self.beta1 * self.m[name].astype(np.float64) + (1 - self.beta1) * grad
        v = self.beta2 * self.v[name].astype(np.float64) + (1 - self.beta2) * grad * grad
        self.m[name] = m.astype(np.float32)
        self.v[name] = v.astype(np.float32)
        self.steps[name] = k
        m_hat = m / (1 - self.beta1 ** k)
        v_hat = v / (1 - self.beta2 ** k)
        param[...] = (param.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype)

    def remap_rows(self, prefix: str, keep: np.ndarray, n_new: int) -> None:
        """Reindex row-wise moments after densification: kept rows, then ``n_new`` fresh rows."""
        for name in list(self.m):
            if not name.startswith(prefix):
                continue
            for store in (self.m, self.v):
                old = store[name][keep]
                store[name] = np.concatenate([old, np.zeros((n_new,) + old.shape[1:], dtype=np.float32)])


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    config: TrainConfig
    fg: GaussianSet
    bg: GaussianSet
    field_fg: DeformationField
    field_bg: DeformationField | None
    cameras: list[Camera]
    extent: float
    optimizer: Adam = field(default_factory=Adam)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    stage: str = "init"
    iteration: int = 0
    events: list[dict] = field(default_factory=list)

    @property
    def unified(self) -> bool:
        return self.field_bg is None

    def deformed(self, t: float, tapes: bool = False):
        """Deformed (foreground, background) splats at time ``t``."""
        freeze = self.config.freeze_background_opacity
        if self.unified:
            base = [self.fg.splats(), self.bg.splats(freeze_opacity=freeze)]
            merged = Splats.concat(base)
            out, tape = deform(self.field_fg, merged, t, return_tape=True)
            n = len(self.fg)
            fg_s = _slice_splats(out, slice(0, n))
            bg_s = _slice_splats(out, slice(n, None))
            return (fg_s, bg_s, tape) if tapes else (fg_s, bg_s)
        if tapes:
            fg_s, tf = deform(self.field_fg, self.fg, t, return_tape=True)
            bg_s, tb = deform(self.field_bg, self.bg, t, freeze_opacity=freeze, return_tape=True)
            return fg_s, bg_s, (tf, tb)
        return deform(self.field_fg, self.fg, t), deform(self.field_bg, self.bg, t, freeze_opacity=freeze)

    def render(self, cam: Camera, t: float) -> RenderOutput:
        fg_s, bg_s = self.deformed(t)
        return render([fg_s, bg_s], cam, t, legacy_opacity=self.config.legacy_opacity)

    def render_foreground(self, cam: Camera, t: float) -> RenderOutput:
        fg_s, _ = self.deformed(t)
        return render(fg_s, cam, t, legacy_opacity=self.config.legacy_opacity)


def _slice_splats(s: Splats, sl: slice) -> Splats:
    return Splats(*(getattr(s, f.name)[sl] for f in dataclasses.fields(Splats)))


def init_scales(positions: np.ndarray) -> np.ndarray:
    """Isotropic log scales from the RMS distance to the three nearest neighbours."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < 2:
        return np.full((len(pos), 3), np.log(0.01))
    k = min(4, len(pos))
    dist, _ = cKDTree(pos).query(pos, k=k)
    d2 = np.mean(dist[:, 1:] ** 2, axis=1)
    return np.repeat(np.log(np.sqrt(np.maximum(d2, 1e-14)))[:, None], 3, axis=1)


def make_set(pc: PointCloud, tag: str) -> GaussianSet:
    return GaussianSet.from_points(pc.positions, pc.colors, init_scales(pc.positions), tag=tag)


def segment_scene(scene: TrainingData, pc: PointCloud, observed_only: bool = False):
    cams = scene.train_cameras
    masks = [scene.mask0(c.id) for c in cams]
    return split_point_cloud(pc, cams, masks, observed_only)


def initialize(scene: TrainingData, config: TrainConfig, pc: PointCloud | None = None,
               fg_cloud: PointCloud | None = None, bg_cloud: PointCloud | None = None) -> TrainState:
    """Segment (unless clouds are given), resample and build both sets and fields."""
    rng = np.random.default_rng(config.seed)
    if fg_cloud is None or bg_cloud is None:
        if pc is None:
            raise ValueError("either a point cloud or pre-split clouds are required")
        fg_cloud, bg_cloud = segment_scene(scene, pc)
        if fg_cloud is None or bg_cloud is None:
            raise ValueError("segmentation left one representation empty")
    fg_cloud = voxel_resample(fg_cloud, config.fg_points, rng)
    bg_cloud = voxel_resample(bg_cloud, config.bg_points, rng)
    fg = make_set(fg_cloud, FOREGROUND)
    bg = make_set(bg_cloud, BACKGROUND)
    kw = dict(resolution=config.plane_resolution, time_resolution=config.time_resolution,
              features=config.features, hidden=config.hidden, rng=rng)
    if config.unified_field:
        field_fg = DeformationField.create(np.concatenate([fg_cloud.positions, bg_cloud.positions]), UNIFIED, **kw)
        field_bg = None
    else:
        field_fg = DeformationField.create(fg_cloud.positions, FOREGROUND, **kw)
        field_bg = DeformationField.create(bg_cloud.positions, BACKGROUND, **kw)
    cams = list(scene.cameras)
    return TrainState(config, fg, bg, field_fg, field_bg, cams, scene_extent(scene.train_cameras),
                      rng=rng)


# ------------------------------------------------------------- sampling

class EpochSampler:
    """Cycles through ``items`` in a fresh random order each epoch."""

    def __init__(self, items: Sequence, rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self.queue: list = []

    def __next__(self):
        if not self.queue:
            self.queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
        return self.queue.pop()


def _schedule(total: int, fractions: Sequence[float]) -> set[int]:
    return {min(total - 1, int(math.floor(f * total))) for f in fractions} if total > 0 else set()


def dynamic_schedule(total: int, events: int) -> set[int]:
    return _schedule(total, [(k + 1) / (events + 1) for k in range(events)])


def _position_lr(cfg: TrainConfig, extent: float, it: int, total: int) -> float:
    frac = it / max(total - 1, 1)
    return extent * math.exp((1 - frac) * math.log(cfg.lr_positions) + frac * math.log(cfg.lr_positions_final))


def _lr_table(cfg: TrainConfig, pos_lr: float) -> dict[str, float]:
    return {"positions": pos_lr, "rotations": cfg.lr_rotations, "log_scales": cfg.lr_scales,
            "color_logits": cfg.lr_colors, "opacity_logits": cfg.lr_opacity, "omega": cfg.lr_opacity,
            "mu": cfg.lr_opacity}


def _apply_set(state: TrainState, prefix: str, g: GaussianSet, raw: dict[str, np.ndarray],
               lrs: dict[str, float], frozen: Sequence[str] = ()) -> None:
    for name in GaussianSet.PARAMS:
        if name in frozen:
            continue
        state.optimizer.step(f"{prefix}.{name}", getattr(g, name), raw[name], lrs[name])
    np.clip(g.mu, 0.0, 1.0, out=g.mu)


def _add_regularizer(state: TrainState, g: GaussianSet, grads: SplatGrads, report: LossReport, name: str,
                     frozen_opacity: bool = False) -> None:
    if frozen_opacity or len(g) == 0:
        return
    cfg = state.config
    value, d_h, d_om = opacity_regularizer(g.peak_opacity, g.omega, cfg.lambda_h, cfg.lambda_omega)
    report.add(f"reg_{name}", value)
    grads.opacity = grads.opacity + d_h
    grads.omega = grads.omega + d_om


def _psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(1.0 / mse))


class _GradStats:
    """Accumulated screen-space gradient norms for the gradient-threshold densifier."""

    def __init__(self):
        self.sum: dict[str, np.ndarray] = {}
        self.count: dict[str, np.ndarray] = {}

    def add(self, key: str, n: int, grads: SplatGrads, width: int, height: int):
        if key not in self.sum or len(self.sum[key]) != n:
            self.sum[key], self.count[key] = np.zeros(n), np.zeros(n)
        ndc = grads.means2d * np.array([0.5 * width, 0.5 * height])
        norm = np.linalg.norm(ndc, axis=1)
        seen = norm > 0
        self.sum[key][seen] += norm[seen]
        self.count[key][seen] += 1

    def mean(self, key: str, n: int) -> np.ndarray:
        if key not in self.sum or len(self.sum[key]) != n:
            return np.zeros(n)
        return self.sum[key] / np.maximum(self.count[key], 1)

    def reset(self):
        self.sum.clear()
        self.count.clear()


def _densify_event(state: TrainState, stage: str, stats: _GradStats) -> None:
    cfg = state.config
    before = (len(state.fg), len(state.bg))
    if cfg.legacy_densify:
        for key in ("fg", "bg"):
            g = getattr(state, key)
            grad = stats.mean(key, len(g))
            new, keep, parents = gradient_threshold_densify(g, grad, state.rng, cfg.grad_threshold, state.extent)
            state.optimizer.remap_rows(f"{key}.", keep, len(parents))
            setattr(state, key, new)
        stats.reset()
    else:
        if stage == CANONICAL:
            new, parents = densify_canonical(state.fg, state.rng)
        else:
            scores = displacement_stats(state.field_fg, state.fg)
            new, parents = densify_dynamic(state.fg, scores, state.rng)
        state.optimizer.remap_rows("fg.", np.arange(len(state.fg)), len(parents))
        state.fg = new
    if cfg.prune_threshold > 0:
        pruned, keep = prune_low_opacity(state.fg, cfg.prune_threshold)
        state.optimizer.remap_rows("fg.", keep, 0)
        state.fg = pruned
    event = {"stage": stage, "iteration": state.iteration, "fg_before": before[0], "bg_before": before[1],
             "fg_after": len(state.fg), "bg_after": len(state.bg)}
    state.events.append(event)
    log.info("densify %s it=%d fg %d -> %d, bg %d -> %d", stage, state.iteration, before[0], len(state.fg),
             before[1], len(state.bg))


MetricCallback = Callable[[dict], None]


def _emit(state: TrainState, callback: MetricCallback | None, loss: float, psnr: float) -> None:
    row = {"stage": state.stage, "iter": state.iteration, "loss": loss, "psnr": psnr,
           "n_fg": len(state.fg), "n_bg": len(state.bg)}
    if callback is not None:
        callback(row)


def train_canonical(state: TrainState, scene: TrainingData, callback: MetricCallback | None = None,
                    iterations: int | None = None) -> TrainState:
    """Anchor both sets to t=0 using only the first frame of each training camera."""
    cfg = state.config
    total = cfg.canonical_iters if iterations is None else iterations
    cams = scene.train_cameras
    targets, masks, bled = {}, {}, {}
    for cam in cams:
        if scene.times(cam.id)[0] != 0.0:
            raise ValueError(f"camera {cam.id} has no frame at t=0")
        targets[cam.id] = scene.image(cam.id, 0)
        masks[cam.id] = scene.mask0(cam.id)
        bled[cam.id] = background_target(targets[cam.id], masks[cam.id])
    sampler = EpochSampler(cams, state.rng)
    events = _schedule(total, cfg.canonical_densify_at)
    stats = _GradStats()
    freeze_bg = cfg.freeze_background_opacity
    state.stage = CANONICAL
    state.iteration = 0
    for it in range(total):
        state.iteration = it
        cam = next(sampler)
        img = targets[cam.id]
        report = LossReport()
        lrs = _lr_table(cfg, _position_lr(cfg, state.extent, it, total))
        fg_s = state.fg.splats()
        bg_s = state.bg.splats(freeze_opacity=freeze_bg)
        if cfg.legacy_canonical:
            out = render([fg_s, bg_s], cam, 0.0, legacy_opacity=cfg.legacy_opacity)
            value, d_rgb, _ = panoptic_loss(img, out.rgb, cfg.loss_norm)
            report.add("panoptic", value)
            g_f, g_b = render_backward(out, d_rgb).split(out.sizes)
            psnr = _psnr(out.rgb, img)
        else:
            background = state.rng.uniform(0.0, 1.0, size=3)
            out_f = render(fg_s, cam, 0.0, legacy_opacity=cfg.legacy_opacity)
            value, d_rgb, d_alpha = foreground_loss(img, masks[cam.id], out_f.rgb, out_f.alpha, background,
                                                    cfg.loss_norm)
            report.add("fg", value)
            g_f = render_backward(out_f, d_rgb, d_alpha)
            out_b = render(bg_s, cam, 0.0, legacy_opacity=cfg.legacy_opacity)
            value, d_rgb, _ = background_loss(img, masks[cam.id], out_b.rgb, bled_target=bled[cam.id],
                                              norm=cfg.loss_norm)
            report.add("bg", value)
            g_b = render_backward(out_b, d_rgb)
            composite = out_f.rgb + (1.0 - out_f.alpha)[..., None] * out_b.rgb
            psnr = _psnr(composite, img)
        if cfg.legacy_densify:
            stats.add("fg", len(state.fg), g_f, cam.image_width, cam.image_height)
            stats.add("bg", len(state.bg), g_b, cam.image_width, cam.image_height)
        _add_regularizer(state, state.fg, g_f, report, "fg")
        _add_regularizer(state, state.bg, g_b, report, "bg", freeze_bg)
        _apply_set(state, "fg", state.fg, state.fg.raw_gradients(g_f), lrs, frozen=("mu",))
        _apply_set(state, "bg", state.bg, state.bg.raw_gradients(g_b, freeze_bg), lrs, frozen=("mu",))
        if it in events:
            _densify_event(state, CANONICAL, stats)
        if cfg.log_every and (it % cfg.log_every == 0 or it == total - 1):
            _emit(state, callback, report.total, psnr)
    state.iteration = total
    return state


def train_dynamic(state: TrainState, scene: TrainingData, callback: MetricCallback | None = None,
                  iterations: int | None = None) -> TrainState:
    """Jointly train both sets and fields on every frame with the panoptic loss."""
    if state.stage != CANONICAL:
        raise ValueError(f"dynamic training needs a completed canonical stage (state is {state.stage!r})")
    cfg = state.config
    total = cfg.dynamic_iters if iterations is None else iterations
    cams = scene.train_cameras
    pairs = [(cam, k) for cam in cams for k in range(len(scene.times(cam.id)))]
    sampler = EpochSampler(pairs, state.rng)
    events = dynamic_schedule(total, cfg.dynamic_densify_events)
    stats = _GradStats()
    freeze_bg = cfg.freeze_background_opacity
    state.stage = DYNAMIC
    state.iteration = 0
    field_lrs = {}
    for it in range(total):
        state.iteration = it
        cam, k = next(sampler)
        t = scene.times(cam.id)[k]
        img = scene.image(cam.id, k)
        report = LossReport()
        lrs = _lr_table(cfg, _position_lr(cfg, state.extent, it, total))
        fg_s, bg_s, tapes = state.deformed(t, tapes=True)
        out = render([fg_s, bg_s], cam, t, legacy_opacity=cfg.legacy_opacity)
        value, d_rgb, _ = panoptic_loss(img, out.rgb, cfg.loss_norm)
        report.add("panoptic", value)
        g_f, g_b = render_backward(out, d_rgb).split(out.sizes)
        if cfg.legacy_densify:
            stats.add("fg", len(state.fg), g_f, cam.image_width, cam.image_height)
            stats.add("bg", len(state.bg), g_b, cam.image_width, cam.image_height)

        if state.unified:
            merged = SplatGrads(*(np.concatenate([getattr(g_f, f.name), getattr(g_b, f.name)])
                                  for f in dataclasses.fields(SplatGrads)))
            fgrads, point = deform_backward(state.field_fg, tapes, merged.positions, merged.rotations,
                                            merged.colors)
            n = len(state.fg)
            for key in ("positions", "rotations", "colors"):
                setattr(g_f, key, point[key][:n])
                setattr(g_b, key, point[key][n:])
            _step_field(state, "field_fg", state.field_fg, fgrads)
        else:
            tf, tb = tapes
            fgrads, point = deform_backward(state.field_fg, tf, g_f.positions, g_f.rotations, g_f.colors)
            g_f.positions, g_f.rotations, g_f.colors = point["positions"], point["rotations"], point["colors"]
            _step_field(state, "field_fg", state.field_fg, fgrads)
            bgrads, point = deform_backward(state.field_bg, tb, g_b.positions)
            g_b.positions = point["positions"]
            _step_field(state, "field_bg", state.field_bg, bgrads)

        _add_regularizer(state, state.fg, g_f, report, "fg")
        _add_regularizer(state, state.bg, g_b, report, "bg", freeze_bg)
        _apply_set(state, "fg", state.fg, state.fg.raw_gradients(g_f), lrs)
        _apply_set(state, "bg", state.bg, state.bg.raw_gradients(g_b, freeze_bg), lrs,
                   frozen=("color_logits", "rotations"))
        if it in events:
            _densify_event(state, DYNAMIC, stats)
        if cfg.log_every and (it % cfg.log_every == 0 or it == total - 1):
            _emit(state, callback, report.total, _psnr(out.rgb, img))
    state.iteration = total
    return state


def _step_field(state: TrainState, prefix: str, fld: DeformationField, grads: dict[str, np.ndarray]) -> None:
    cfg = state.config
    for name, param in field_parameters(fld).items():
        lr = cfg.lr_planes if name.startswith("plane_") else cfg.lr_heads
        state.optimizer.step(f"{prefix}.{name}", param, grads[name], lr)


# ------------------------------------------------------------ checkpoint

def _field_arrays(prefix: str, fld: DeformationField) -> dict[str, np.ndarray]:
    out = {f"{prefix}.{k}": v for k, v in field_parameters(fld).items()}
    out[f"{prefix}.box_min"] = np.asarray(fld.box_min, dtype=np.float32)
    out[f"{prefix}.box_max"] = np.asarray(fld.box_max, dtype=np.float32)
    return out


def _field_from(prefix: str, variant: str, arrays: dict[str, np.ndarray]) -> DeformationField:
    from .hexplane import PLANES, VARIANT_HEADS

    planes = [PlaneGrid(p, arrays[f"{prefix}.plane_{p}"]) for p in PLANES]
    heads = {k: (arrays[f"{prefix}.head_{k}_w"], arrays[f"{prefix}.head_{k}_b"]) for k in VARIANT_HEADS[variant]}
    return DeformationField(planes, arrays[f"{prefix}.trunk_w"], arrays[f"{prefix}.trunk_b"], heads,
                            arrays[f"{prefix}.box_min"], arrays[f"{prefix}.box_max"], variant)


def save_checkpoint(state: TrainState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for key in ("fg", "bg"):
        g = getattr(state, key)
        for name in GaussianSet.PARAMS:
            arrays[f"{key}.{name}"] = getattr(g, name)
    arrays.update(_field_arrays("field_fg", state.field_fg))
    if state.field_bg is not None:
        arrays.update(_field_arrays("field_bg", state.field_bg))
    for name in sorted(state.optimizer.m):
        arrays[f"adam_m/{name}"] = state.optimizer.m[name]
        arrays[f"adam_v/{name}"] = state.optimizer.v[name]
    meta = {
        "config": state.config.to_dict(),
        "stage": state.stage,
        "iteration": state.iteration,
        "extent": state.extent,
        "adam_steps": dict(sorted(state.optimizer.steps.items())),
        "rng": state.rng.bit_generator.state,
        "cameras": [c.to_dict() for c in state.cameras],
        "field_fg_variant": state.field_fg.variant,
        "events": state.events,
    }
    checkpoint.write_container(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = checkpoint.read_container(path)
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        sets = {}
        for key, tag in (("fg", FOREGROUND), ("bg", BACKGROUND)):
            sets[key] = GaussianSet(**{n: arrays[f"{key}.{n}"] for n in GaussianSet.PARAMS}, tag=tag)
        field_fg = _field_from("field_fg", meta["field_fg_variant"], arrays)
        field_bg = _field_from("field_bg", BACKGROUND, arrays) if "field_bg.trunk_w" in arrays else None
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: checkpoint is missing {exc}") from exc
    opt = Adam()
    for name, steps in meta["adam_steps"].items():
        opt.m[name] = arrays[f"adam_m/{name}"]
        opt.v[name] = arrays[f"adam_v/{name}"]
        opt.steps[name] = int(steps)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    cams = [Camera.from_dict(d) for d in meta["cameras"]]
    return TrainState(cfg, sets["fg"], sets["bg"], field_fg, field_bg, cams, float(meta["extent"]), opt, rng,
                      meta["stage"], int(meta["iteration"]), list(meta.get("events", [])))
