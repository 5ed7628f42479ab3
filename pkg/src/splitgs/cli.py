"""Command-line entry point: ``splitgs <subcommand> ...``.

Failures print one ``error: <kind>: <message>`` line on stderr.  Usage
problems (bad flags, missing input files) exit with status 2, anything else
with status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("splitgs")

FG_PLY = "foreground.ply"
BG_PLY = "background.ply"
METRIC_HEADER = "iter\tloss\tpsnr\tn_fg\tn_bg"


class UsageError(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _print_metrics(row: dict) -> None:
    print(f"{row['iter']}\t{row['loss']:.6f}\t{row['psnr']:.3f}\t{row['n_fg']}\t{row['n_bg']}", flush=True)


def _config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.from_file(_require(Path(args.config), "config file")) if args.config else TrainConfig()
    cfg = cfg.with_overrides(args.set or [])
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    return cfg


# ------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    from .synth import make_scene, write_scene

    scene = make_scene(args.recipe, seed=0 if args.seed is None else args.seed)
    root = write_scene(scene, args.out)
    print(f"wrote {len(scene.cameras)} cameras x {len(scene.frame_times)} frames to {root}")


def _load_scene(path):
    from .scene_io import load_scene

    return load_scene(_require(Path(path) / "cameras.json", "scene cameras.json").parent)


def cmd_segment(args) -> None:
    from .scene_io import load_point_cloud, save_point_cloud
    from .trainer import segment_scene

    scene = _load_scene(args.scene)
    ply = Path(args.points) if args.points else Path(args.scene) / "points.ply"
    pc = load_point_cloud(_require(ply, "point cloud"))
    fg, bg = segment_scene(scene, pc, args.observed_only)
    out = Path(args.out) if args.out else Path(args.scene)
    out.mkdir(parents=True, exist_ok=True)
    for name, cloud in ((FG_PLY, fg), (BG_PLY, bg)):
        if cloud is None:
            raise ValueError(f"segmentation produced an empty {name.split('.')[0]} set")
        save_point_cloud(out / name, cloud)
    print(f"foreground {len(fg)} points -> {out / FG_PLY}")
    print(f"background {len(bg)} points -> {out / BG_PLY}")


def cmd_train_canonical(args) -> None:
    from .scene_io import load_point_cloud
    from .trainer import initialize, save_checkpoint, train_canonical

    scene = _load_scene(args.scene)
    cfg = _config(args)
    root = Path(args.scene)
    if (root / FG_PLY).exists() and (root / BG_PLY).exists():
        state = initialize(scene, cfg, fg_cloud=load_point_cloud(root / FG_PLY),
                           bg_cloud=load_point_cloud(root / BG_PLY))
    else:
        state = initialize(scene, cfg, pc=load_point_cloud(_require(root / "points.ply", "point cloud")))
    print(METRIC_HEADER, flush=True)
    train_canonical(state, scene, callback=_print_metrics)
    save_checkpoint(state, args.out)
    log.info("saved %s", args.out)


def cmd_train_dynamic(args) -> None:
    from .trainer import load_checkpoint, save_checkpoint, train_dynamic

    state = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    scene = _load_scene(args.scene)
    if args.set:
        state.config = state.config.with_overrides(args.set)
    if args.seed is not None:
        state.rng = np.random.default_rng(args.seed)
    print(METRIC_HEADER, flush=True)
    train_dynamic(state, scene, callback=_print_metrics)
    save_checkpoint(state, args.out)
    log.info("saved %s", args.out)


def _camera(state, cam_id: int):
    for cam in state.cameras:
        if cam.id == cam_id:
            return cam
    raise UsageError(f"checkpoint has no camera {cam_id} (known: {[c.id for c in state.cameras]})")


def cmd_render(args) -> None:
    from .scene_io import save_image
    from .trainer import load_checkpoint

    state = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    if not 0.0 <= args.t <= 1.0:
        raise UsageError(f"--t must lie in [0, 1], got {args.t}")
    cam = _camera(state, args.camera)
    out = state.render_foreground(cam, args.t) if args.foreground else state.render(cam, args.t)
    save_image(args.out, np.clip(out.rgb, 0.0, 1.0))
    print(f"wrote {cam.image_width}x{cam.image_height} render to {args.out}")


def cmd_evaluate(args) -> None:
    from .evaluation import evaluate_views, mean_metrics, metrics_csv
    from .trainer import load_checkpoint

    state = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    scene = _load_scene(args.scene)
    cams = {"test": scene.test_cameras or scene.train_cameras, "train": scene.train_cameras,
            "all": scene.cameras}[args.views]
    rows = evaluate_views(lambda cam, t: state.render(cam, t).rgb, scene, cams)
    text = metrics_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
        means = mean_metrics(rows)
        print(" ".join(f"{k}={v:.4f}" for k, v in means.items()))
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="splitgs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene directory")
    s.add_argument("--recipe", default="orbit", choices=["orbit", "flame", "static"])
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", parents=[common], help="split points.ply into foreground/background PLYs")
    s.add_argument("--scene", required=True, help="scene directory with cameras.json")
    s.add_argument("--points", help="point cloud (default: <scene>/points.ply)")
    s.add_argument("--out", help="output directory (default: the scene directory)")
    s.add_argument("--observed-only", action="store_true",
                   help="only cameras that see a point need to mask it in (default: all cameras)")
    s.set_defaults(func=cmd_segment)

    for name, func, help_ in (("train-canonical", cmd_train_canonical, "canonical stage at t=0"),
                              ("train-dynamic", cmd_train_dynamic, "dynamic stage over all frames")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--scene", required=True, help="scene directory")
        if name == "train-dynamic":
            s.add_argument("--checkpoint", required=True, help="checkpoint from train-canonical")
        else:
            s.add_argument("--config", help="key = value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
        s.add_argument("--out", required=True, help="checkpoint to write")
        s.set_defaults(func=func)

    s = sub.add_parser("render", parents=[common], help="render one view from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", type=int, required=True, help="camera id")
    s.add_argument("--t", type=float, required=True, help="normalised time in [0, 1]")
    s.add_argument("--out", required=True, help="PNG path")
    s.add_argument("--foreground", action="store_true", help="render the foreground set alone")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("evaluate", parents=[common], help="per-frame PSNR/SSIM (full and masked) as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--views", choices=["test", "train", "all"], default="test")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_evaluate)
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    import numba

    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"--threads must be between 1 and {numba.config.NUMBA_NUM_THREADS}")
    numba.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: usage: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: usage: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
