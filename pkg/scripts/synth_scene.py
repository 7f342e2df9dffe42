#!/usr/bin/env python3
"""Synth Scene — random primitive scenes rendered along a camera orbit.

Scene description (flat YAML, every key optional):
  n_primitives  500         number of Gaussians, uniform in a cube of side ``extent``
  extent        2.0         metres
  n_frames      100
  width/height  320 × 240
  fx/fy         0.8·width   cx, cy default to the image centre
  orbit_radius  3.0         metres from the cube centre
  orbit_height  0.5         metres above it
  orbit_arc_deg 360.0       a full orbit revisits the start (loop closure)
  fps           30.0
  scale_min / scale_max     Gaussian standard deviations, metres
  opacity       0.9
  depth_scale   5000.0
  seed          0

Output (TUM layout):
  rgb/NNNNNN.png, depth/NNNNNN.png (uint16, metres × depth_scale, 0 = no
  surface), rgb.txt, depth.txt, groundtruth.txt, camera.yaml and scene.hpm.

Depth is rendered with per-primitive camera depth as the colour and divided
by the accumulated alpha; pixels with alpha below 0.5 carry no depth.
"""

from __future__ import annotations

import math
import sys
from collections.abc import Iterator
from dataclasses import dataclass, fields
from pathlib import Path

import cv2
import numpy as np
import yaml

from dataset_loaders import CAMERA_FILENAME, write_camera
from hyper_core import HyperPrimitive, Intrinsics, Pose
from map_io import encode_hpm, format_tum_line, to_uint8
from sh_basis import rgb_to_sh_dc
from slam_config import ConfigError
from splat_rasterizer import GaussianBatch, RasterSettings, render

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

DEPTH_ALPHA_MIN: float = 0.5
SCENE_MAP_FILENAME: str = "scene.hpm"
_WORLD_UP = np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    n_primitives: int = 500
    extent: float = 2.0
    n_frames: int = 100
    width: int = 320
    height: int = 240
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None
    orbit_radius: float = 3.0
    orbit_height: float = 0.5
    orbit_arc_deg: float = 360.0
    fps: float = 30.0
    scale_min: float = 0.02
    scale_max: float = 0.08
    opacity: float = 0.9
    depth_scale: float = 5000.0
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        for name in ("n_primitives", "n_frames", "width", "height", "extent", "orbit_radius", "fps",
                     "scale_min", "depth_scale"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        if self.scale_max < self.scale_min:
            errors.append("scale_max must be >= scale_min")
        if not 0.0 < self.opacity < 1.0:
            errors.append("opacity must be in (0, 1)")
        if self.orbit_radius <= self.extent * math.sqrt(3) / 2:
            errors.append("orbit_radius must keep the camera outside the primitive cube")
        if errors:
            raise ConfigError("scene: " + "; ".join(errors))

    def intrinsics(self) -> Intrinsics:
        fx = self.fx or 0.8 * self.width
        return Intrinsics(
            fx=fx,
            fy=self.fy or fx,
            cx=self.cx if self.cx is not None else self.width / 2.0,
            cy=self.cy if self.cy is not None else self.height / 2.0,
            width=self.width,
            height=self.height,
            depth_scale=self.depth_scale,
        )


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _log(msg: str, verbose: bool) -> None:
    if verbose:
        print(f"[synth_scene] {msg}", file=sys.stderr)


def load_scene_spec(path: str | Path | None) -> SceneSpec:
    if path is None:
        return SceneSpec()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read scene {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"scene {path} must be a mapping")
    known = {f.name for f in fields(SceneSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown scene key(s): {', '.join(unknown)}")
    return SceneSpec(**data)


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = _WORLD_UP) -> Pose:
    """World-to-camera pose at ``eye`` with z towards ``target`` and y pointing down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_rt(R, -R @ eye)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def make_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> list[HyperPrimitive]:
    """Random isotropic-to-anisotropic Gaussians with saturated colours."""
    rng = rng or np.random.default_rng(spec.seed)
    n = spec.n_primitives
    positions = rng.uniform(-spec.extent / 2, spec.extent / 2, size=(n, 3))
    log_scales = rng.uniform(np.log(spec.scale_min), np.log(spec.scale_max), size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    logit = math.log(spec.opacity / (1.0 - spec.opacity))
    prims = []
    for i in range(n):
        sh = np.zeros((16, 3))
        sh[0] = rgb_to_sh_dc(colors[i])
        prims.append(HyperPrimitive(
            position=positions[i], rotation=rotations[i], log_scale=log_scales[i],
            opacity_logit=logit, sh=sh,
        ))
    return prims


def orbit_poses(spec: SceneSpec) -> list[Pose]:
    arc = math.radians(spec.orbit_arc_deg)
    poses = []
    for i in range(spec.n_frames):
        theta = arc * i / spec.n_frames
        eye = np.array([
            spec.orbit_radius * math.cos(theta),
            spec.orbit_radius * math.sin(theta),
            spec.orbit_height,
        ])
        poses.append(look_at(eye, np.zeros(3)))
    return poses


def render_depth(
    batch: GaussianBatch,
    pose: Pose,
    K: Intrinsics,
    settings: RasterSettings | None = None,
    alpha_min: float = DEPTH_ALPHA_MIN,
) -> np.ndarray:
    """Alpha-normalised expected depth; 0 where coverage is below ``alpha_min``."""
    z = pose.transform(batch.positions)[:, 2] if len(batch) else np.zeros(0)
    out = render(batch, pose, K, settings, color_override=np.repeat(z[:, None], 3, axis=1))
    alpha = 1.0 - out.final_transmittance
    depth = np.zeros_like(alpha)
    covered = alpha >= alpha_min
    depth[covered] = out.image[..., 0][covered] / alpha[covered]
    return depth


def render_views(
    prims: list[HyperPrimitive],
    poses: list[Pose],
    K: Intrinsics,
    settings: RasterSettings | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (rgb in [0, 1], metric depth) for every pose."""
    batch = GaussianBatch.from_primitives(prims)
    for pose in poses:
        yield np.clip(render(batch, pose, K, settings).image, 0.0, 1.0), render_depth(batch, pose, K, settings)


def write_synthetic_sequence(
    out_dir: str | Path,
    spec: SceneSpec,
    settings: RasterSettings | None = None,
    verbose: bool = False,
) -> dict[str, Path]:
    """Render the orbit and write it in the TUM layout; returns the written paths."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    K = spec.intrinsics()
    prims = make_scene(spec)
    poses = orbit_poses(spec)

    rgb_lines, depth_lines, gt_lines = ["# timestamp filename"], ["# timestamp filename"], [
        "# timestamp tx ty tz qx qy qz qw"
    ]
    for i, (pose, (rgb, depth)) in enumerate(zip(poses, render_views(prims, poses, K, settings))):
        t = i / spec.fps
        name = f"{i:06d}.png"
        if not cv2.imwrite(str(out / "rgb" / name), cv2.cvtColor(to_uint8(rgb), cv2.COLOR_RGB2BGR)):
            raise OSError(f"cannot write {out / 'rgb' / name}")
        depth_u16 = np.clip(np.round(depth * spec.depth_scale), 0, np.iinfo(np.uint16).max).astype(np.uint16)
        if not cv2.imwrite(str(out / "depth" / name), depth_u16):
            raise OSError(f"cannot write {out / 'depth' / name}")
        rgb_lines.append(f"{t:.6f} rgb/{name}")
        depth_lines.append(f"{t:.6f} depth/{name}")
        gt_lines.append(format_tum_line(t, pose))
        _log(f"frame {i + 1}/{len(poses)}", verbose and (i + 1) % 10 == 0)

    paths = {
        "rgb": out / "rgb.txt",
        "depth": out / "depth.txt",
        "groundtruth": out / "groundtruth.txt",
        "camera": out / CAMERA_FILENAME,
        "scene": out / SCENE_MAP_FILENAME,
    }
    for key, lines in (("rgb", rgb_lines), ("depth", depth_lines), ("groundtruth", gt_lines)):
        paths[key].write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_camera(paths["camera"], K)
    paths["scene"].write_bytes(encode_hpm(prims))
    _log(f"wrote {len(poses)} frames of {len(prims)} primitives to {out}", verbose)
    return paths
