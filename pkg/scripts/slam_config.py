#!/usr/bin/env python3
"""SLAM Config — the single flat configuration record for a HyperSLAM run.

Config files are flat YAML mappings (``key: value``).  Every key is a field
of ``SlamConfig``; unknown keys, wrong types and out-of-range values raise
``ConfigError``.  Command-line overrides use ``key=value`` strings whose
values are parsed as YAML scalars, so ``--set gp_levels=0`` and
``--set geometry_densify=false`` behave as they would in the file.

Randomness: ``spawn_generators(seed, names)`` hands each consumer (RANSAC,
densification, keyframe replay, synthetic scenes) its own
``numpy.random.Generator`` derived from one ``SeedSequence``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

MODES: tuple[str, ...] = ("mono", "rgbd")
OPTIMIZERS: tuple[str, ...] = ("sgd", "adam")
_OPTIONAL_FLOATS: frozenset[str] = frozenset({"depth_scale"})


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class ConfigError(ValueError):
    """Raised for unreadable config files, unknown keys or invalid values."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlamConfig:
    # run
    mode: str = "rgbd"
    threads: int = 1
    seed: int = 0
    verbose: bool = False
    max_frames: int = 0                    # 0 = whole sequence
    seed_with_ground_truth: bool = False

    # features
    n_features: int = 1000
    n_octaves: int = 8
    scale_factor: float = 1.2
    match_ratio: float = 0.75
    max_hamming: int = 50

    # tracking / local mapping
    huber_delta: float = math.sqrt(5.99)
    lm_max_iterations: int = 10
    lm_rounds: int = 4
    lm_initial_damping: float = 1e-4
    search_radius_px: float = 15.0
    tracking_min_inliers: int = 15
    tracking_lost_frames: int = 5
    kf_min_inliers: int = 40
    kf_ref_ratio: float = 0.9
    kf_max_gap: int = 30
    covisibility_min_shared: int = 15
    local_ba: bool = True
    bootstrap_min_points: int = 50
    bootstrap_min_parallax_deg: float = 1.0

    # photorealistic mapping
    gp_levels: int = 2
    iters_per_keyframe: int = 300
    lambda_dssim: float = 0.2
    optimizer: str = "sgd"
    lr_position: float = 1.6e-4
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 0.005
    max_primitives: int = 200_000
    freeze_tracked_positions: bool = False
    geometry_densify: bool = True
    geo_neighbors: int = 4
    geo_radius_px: float = 100.0
    optimizer_iters_per_frame: int = 10
    final_iters: int = 1000

    # rasterizer
    tile_size: int = 16
    sh_degree: int = 3
    render_workers: int = 1

    # loop closing
    loop_closure: bool = True
    loop_gap_min: int = 30
    loop_score_min: float = 0.25
    sim3_tau: float = 0.05
    sim3_inlier_min: int = 20
    sim3_ransac_iterations: int = 200

    # evaluation / io
    depth_scale: float | None = None       # None = dataset default
    association_max_dt: float = 0.02
    eval_every: int = 1
    eval_held_out: bool = False            # also render non-keyframe frames at aligned ground truth

    def __post_init__(self) -> None:
        errors = _range_errors(self)
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _range_errors(cfg: SlamConfig) -> list[str]:
    errors = []
    if cfg.mode not in MODES:
        hint = " (stereo input is not supported)" if cfg.mode == "stereo" else ""
        errors.append(f"mode must be one of {MODES}, got {cfg.mode!r}{hint}")
    if cfg.optimizer not in OPTIMIZERS:
        errors.append(f"optimizer must be one of {OPTIMIZERS}, got {cfg.optimizer!r}")
    positive = (
        "threads", "n_features", "n_octaves", "lm_max_iterations", "lm_rounds", "tracking_lost_frames",
        "kf_max_gap", "iters_per_keyframe", "densify_interval", "max_primitives", "geo_neighbors",
        "tile_size", "render_workers", "sim3_ransac_iterations", "eval_every", "huber_delta",
        "lm_initial_damping", "search_radius_px", "geo_radius_px", "sim3_tau", "lr_position",
        "lr_sh_dc", "lr_sh_rest", "lr_opacity", "lr_scale", "lr_rotation", "association_max_dt",
    )
    for name in positive:
        if not getattr(cfg, name) > 0:
            errors.append(f"{name} must be > 0 (got {getattr(cfg, name)!r})")
    non_negative = (
        "seed", "max_frames", "tracking_min_inliers", "kf_min_inliers", "covisibility_min_shared",
        "gp_levels", "optimizer_iters_per_frame", "final_iters", "loop_gap_min", "sim3_inlier_min",
        "bootstrap_min_points", "bootstrap_min_parallax_deg", "densify_grad_threshold",
        "opacity_prune_threshold",
    )
    for name in non_negative:
        if getattr(cfg, name) < 0:
            errors.append(f"{name} must be >= 0 (got {getattr(cfg, name)!r})")
    if not 0.0 <= cfg.lambda_dssim <= 1.0:
        errors.append(f"lambda_dssim must be in [0, 1] (got {cfg.lambda_dssim})")
    if not 0.0 < cfg.match_ratio <= 1.0:
        errors.append(f"match_ratio must be in (0, 1] (got {cfg.match_ratio})")
    if not 0.0 < cfg.kf_ref_ratio <= 1.0:
        errors.append(f"kf_ref_ratio must be in (0, 1] (got {cfg.kf_ref_ratio})")
    if not 0.0 <= cfg.loop_score_min <= 1.0:
        errors.append(f"loop_score_min must be in [0, 1] (got {cfg.loop_score_min})")
    if not 0 <= cfg.max_hamming <= 256:
        errors.append(f"max_hamming must be in [0, 256] (got {cfg.max_hamming})")
    if not 0 <= cfg.sh_degree <= 3:
        errors.append(f"sh_degree must be in [0, 3] (got {cfg.sh_degree})")
    if not cfg.scale_factor > 1.0:
        errors.append(f"scale_factor must be > 1 (got {cfg.scale_factor})")
    if cfg.depth_scale is not None and not cfg.depth_scale > 0:
        errors.append(f"depth_scale must be > 0 when set (got {cfg.depth_scale})")
    return errors


def _coerce(name: str, value: Any, default: Any) -> Any:
    """Check ``value`` against the type of the field default."""
    if name in _OPTIONAL_FLOATS:
        if value is None:
            return None
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{name} must be a number or null (got {value!r})") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number or null (got {value!r})")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false (got {value!r})")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer (got {value!r})")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # PyYAML reads "1e-4" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number (got {value!r})")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string (got {value!r})")
        return value
    return value


def parse_override(text: str) -> tuple[str, Any]:
    """``"key=value"`` → (key, YAML-parsed value)."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override must look like key=value (got {text!r})")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from exc
    return key, value


def apply_overrides(cfg: SlamConfig, overrides: dict[str, Any]) -> SlamConfig:
    defaults = {f.name: f.default for f in fields(SlamConfig)}
    unknown = sorted(set(overrides) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    typed = {k: _coerce(k, v, defaults[k]) for k, v in overrides.items()}
    return replace(cfg, **typed)


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | list[str] | None = None,
    defaults: dict[str, Any] | None = None,
) -> SlamConfig:
    """Defaults (with ``defaults`` on top), then the YAML file at ``path``, then ``overrides``."""
    cfg = apply_overrides(SlamConfig(), defaults) if defaults else SlamConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"YAML parse error in {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a flat mapping (got {type(data).__name__})")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigError(f"config must be flat; nested values under: {', '.join(map(str, nested))}")
        cfg = apply_overrides(cfg, data)
    if overrides:
        if isinstance(overrides, list):
            overrides = dict(parse_override(item) for item in overrides)
        cfg = apply_overrides(cfg, overrides)
    return cfg


def spawn_generators(seed: int, names: list[str] | tuple[str, ...]) -> dict[str, np.random.Generator]:
    """One independent generator per consumer name, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}
