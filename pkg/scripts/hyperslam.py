#!/usr/bin/env python3
"""HyperSLAM — command-line entry point.

Commands:
  run     --dataset DIR --format tum|replica|synthetic --out DIR
          [--mode mono|rgbd] [--config FILE] [--threads N] [--seed S]
          [--set key=value ...] [--quiet]
          Runs SLAM and writes trajectory.txt, map.hpm, renders/, report.json
          and camera.yaml under --out.  The report is printed as JSON.
  render  --map map.hpm --pose trajectory.txt --out DIR [--camera camera.yaml]
          Renders the map at every trajectory pose into DIR/NNNNNN.ppm.
          --camera defaults to camera.yaml next to the map.
  synth   --out DIR [--scene FILE] [--quiet]
          Writes a synthetic TUM-layout sequence (see synth_scene.py).
  train   --dataset DIR --format ... --out DIR [--init-map map.hpm | --random N]
          [--iters N] [--config FILE] [--set key=value ...] [--quiet]
          Offline splatting with fixed ground-truth poses.

Config precedence: built-in defaults < --config file < --set < dedicated
flags (--mode, --threads, --seed, --quiet).

Exit codes:
  0  success
  1  configuration, dataset, map-format or I/O error (also usage errors)
  2  tracking lost; the partial outputs are still written and
     report.json carries ``"tracking_lost": true``
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from dataset_loaders import (
    CAMERA_FILENAME,
    EmptySequence,
    MalformedPose,
    MissingManifest,
    load_camera,
    load_sequence,
    read_tum_trajectory,
    write_camera,
)
from map_io import MapFormatError, read_map, write_outputs, write_ppm
from slam_config import ConfigError, SlamConfig, apply_overrides, load_config
from slam_runner import RunReport, SlamSystem, TrackingLost, run_slam, train_offline
from splat_rasterizer import GaussianBatch, render
from synth_scene import load_scene_spec, write_synthetic_sequence

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

FORMATS: tuple[str, ...] = ("tum", "replica", "synthetic")
EXIT_OK: int = 0
EXIT_ERROR: int = 1
EXIT_TRACKING_LOST: int = 2

_INPUT_ERRORS = (ConfigError, MissingManifest, EmptySequence, MalformedPose, MapFormatError, OSError)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _error(msg: str) -> int:
    print(f"[hyperslam] ERROR: {msg}", file=sys.stderr)
    return EXIT_ERROR


def _config_from_args(args: argparse.Namespace) -> SlamConfig:
    cfg = load_config(args.config, args.set or None, defaults={"verbose": True})
    flags = {}
    for name in ("mode", "threads", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    if args.quiet:
        flags["verbose"] = False
    return apply_overrides(cfg, flags) if flags else cfg


def _write_run(out: Path, report: RunReport, system: SlamSystem) -> None:
    write_outputs(out, report.to_dict(), report.trajectory, system.hmap, report.renders)
    write_camera(out / CAMERA_FILENAME, system.K)


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, metavar="DIR", help="Sequence directory.")
    p.add_argument("--format", required=True, choices=FORMATS, help="Dataset layout.")
    p.add_argument("--out", required=True, metavar="DIR", help="Output directory.")
    p.add_argument("--config", metavar="FILE", help="Flat YAML config file.")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="Override one config key (repeatable).",
    )
    p.add_argument("--quiet", action="store_true", help="Silence progress output on stderr.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperslam",
        description="Gaussian-splatting SLAM over TUM, Replica and synthetic sequences.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run SLAM on a sequence.")
    _add_dataset_args(run)
    run.add_argument("--mode", help="mono or rgbd (default: from config).")
    run.add_argument("--threads", type=int, help="1 = deterministic; >1 = concurrent workers.")
    run.add_argument("--seed", type=int, help="Seed for every random consumer.")

    rend = sub.add_parser("render", help="Render a saved map along a trajectory.")
    rend.add_argument("--map", required=True, metavar="FILE", help="map.hpm file.")
    rend.add_argument("--pose", required=True, metavar="FILE", help="TUM trajectory file.")
    rend.add_argument("--out", required=True, metavar="DIR", help="Output directory.")
    rend.add_argument("--camera", metavar="FILE", help="camera.yaml (default: next to the map).")

    synth = sub.add_parser("synth", help="Generate a synthetic sequence.")
    synth.add_argument("--scene", metavar="FILE", help="Scene description YAML.")
    synth.add_argument("--out", required=True, metavar="DIR", help="Output directory.")
    synth.add_argument("--quiet", action="store_true", help="Silence progress output on stderr.")

    train = sub.add_parser("train", help="Offline splatting with ground-truth poses.")
    _add_dataset_args(train)
    init = train.add_mutually_exclusive_group()
    init.add_argument("--init-map", metavar="FILE", help="Initialise from a map.hpm file.")
    init.add_argument("--random", type=int, default=100, metavar="N", help="Random initial points (default 100).")
    train.add_argument("--iters", type=int, metavar="N", help="Iterations (default: final_iters).")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    seq = load_sequence(args.dataset, args.format, cfg.depth_scale, cfg.association_max_dt)
    out = Path(args.out)
    try:
        report, system = run_slam(seq.frames, cfg, seq.intrinsics)
    except TrackingLost as exc:
        print(f"[hyperslam] TRACKING LOST: {exc}", file=sys.stderr)
        if exc.system is not None:
            _write_run(out, exc.report, exc.system)
        print(json.dumps(exc.report.to_dict(), indent=2))
        return EXIT_TRACKING_LOST
    _write_run(out, report, system)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    map_path = Path(args.map)
    camera = Path(args.camera) if args.camera else map_path.parent / CAMERA_FILENAME
    K = load_camera(camera)
    hmap = read_map(map_path)
    trajectory = read_tum_trajectory(Path(args.pose))
    items = hmap.primitive_items()
    batch = GaussianBatch.from_primitives([p for _, p in items], [pid for pid, _ in items])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (_, pose) in enumerate(trajectory):
        write_ppm(out / f"{i:06d}.ppm", np.clip(render(batch, pose, K).image, 0.0, 1.0))
    print(json.dumps({"renders": len(trajectory), "primitives": len(items), "out": str(out)}, indent=2))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_scene_spec(args.scene)
    paths = write_synthetic_sequence(args.out, spec, verbose=not args.quiet)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    seq = load_sequence(args.dataset, args.format, cfg.depth_scale, cfg.association_max_dt)
    report, system = train_offline(
        seq.frames, cfg, seq.intrinsics, init_map=args.init_map, n_random=args.random, iterations=args.iters
    )
    _write_run(Path(args.out), report, system)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


_COMMANDS = {"run": cmd_run, "render": cmd_render, "synth": cmd_synth, "train": cmd_train}


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        return _COMMANDS[args.command](args)
    except _INPUT_ERRORS as exc:
        return _error(f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        return _error(str(exc))


if __name__ == "__main__":
    sys.exit(main())
