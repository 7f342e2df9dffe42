#!/usr/bin/env python3
"""Photomap — photorealistic optimisation of the hyper-primitive map.

Pieces:
  ssim / photometric_loss     L = (1-λ)·|I_r - I_gt|₁ + λ·(1 - SSIM), with the
                              exact gradient w.r.t. the rendered image
  build_gaussian_pyramid      5×5 binomial blur + 2× decimation per level
  gp_level                    coarse-to-fine level schedule (n … 0)
  PhotoMapper                 per-keyframe training iterations, keyframe replay,
                              per-class first-order steps, densify/prune cadence
  densify_and_prune           clone / split high-gradient primitives, prune
                              transparent or oversized ones
  geometry_densify            temporary primitives at inactive keypoints

Each keyframe tracks its own training-iteration count, so a keyframe inserted
late still starts on the coarsest pyramid level.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage, signal
from scipy.spatial import cKDTree

from hyper_core import (
    HyperMap,
    HyperPrimitive,
    Keyframe,
    backproject,
    make_primitive,
    quat_to_matrix,
    sample_color,
)
from splat_rasterizer import GaussianBatch, RasterSettings, render, render_backward

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

SSIM_WINDOW: int = 11
SSIM_SIGMA: float = 1.5
SSIM_C1: float = 0.01**2
SSIM_C2: float = 0.03**2
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_LOG_SCALE_MIN: float = math.log(1e-7) + 1e-6
_LOG_SCALE_MAX: float = math.log(1e3) - 1e-6
_SPLIT_SCALE_DIV: float = 1.6
_SPLIT_EXTENT_FRACTION: float = 0.01
_FOOTPRINT_MAX_FRACTION: float = 0.5
_ADAM_BETAS: tuple[float, float] = (0.9, 0.999)
_ADAM_EPS: float = 1e-15


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class DimensionMismatch(ValueError):
    """Raised when two images that must align have different shapes."""


class TooManyLevels(ValueError):
    """Raised when a pyramid would shrink an image side below one pixel per level."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


class CameraMode(str, Enum):
    MONO = "mono"
    RGBD = "rgbd"


@dataclass
class GaussianPyramid:
    levels: list[np.ndarray]

    @property
    def n(self) -> int:
        return len(self.levels) - 1


@dataclass
class TrainSchedule:
    n: int = 2
    total_iters_per_keyframe: int = 300
    lambda_dssim: float = 0.2
    lr_position: float = 1.6e-4        # multiplied by the scene extent
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    optimizer: str = "sgd"
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 0.005
    max_primitives: int = 200_000
    freeze_tracked_positions: bool = False

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ValueError(f"pyramid top level n must be >= 0 (got {self.n})")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError(f"lambda must be in [0, 1] (got {self.lambda_dssim})")
        rates = (self.lr_position, self.lr_sh_dc, self.lr_sh_rest, self.lr_opacity, self.lr_scale, self.lr_rotation)
        if min(rates) <= 0:
            raise ValueError("all learning rates must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam' (got {self.optimizer!r})")
        if self.total_iters_per_keyframe < 1 or self.densify_interval < 1:
            raise ValueError("iteration counts must be >= 1")

    @property
    def iters_per_level(self) -> int:
        """Iterations spent on each of levels n … 1; level 0 keeps the remainder."""
        return max(1, self.total_iters_per_keyframe // (self.n + 1))


# ---------------------------------------------------------------------------
# Image metrics and loss
# ---------------------------------------------------------------------------


def _as_hwc(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def _ssim_kernel(height: int, width: int) -> np.ndarray:
    size = min(SSIM_WINDOW, height, width)
    if size % 2 == 0:
        size -= 1
    size = max(size, 1)
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = signal.convolve(x, k[:, None, None], mode="valid")
    return signal.convolve(out, k[None, :, None], mode="valid")


def _filter_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = signal.convolve(g, k[None, :, None], mode="full")
    return signal.convolve(out, k[:, None, None], mode="full")


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    k = _ssim_kernel(a.shape[0], a.shape[1])
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a**2
    var_b = _filter_valid(b * b, k) - mu_b**2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + SSIM_C1
    A2 = 2.0 * cov + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    return k, mu_a, mu_b, A1, A2, B1, B2


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels."""
    a, b = _as_hwc(a), _as_hwc(b)
    _check_same_shape(a, b)
    _, _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its analytic gradient w.r.t. ``a``."""
    squeeze = np.asarray(a).ndim == 2
    a, b = _as_hwc(a), _as_hwc(b)
    _check_same_shape(a, b)
    k, mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    S = (A1 * A2) / (B1 * B2)
    scale = 1.0 / S.size

    d_mu = S * (2.0 * mu_b / A1 - 2.0 * mu_a / B1)
    d_var = -S / B2
    d_cov = 2.0 * S / A2
    g_m1 = scale * (d_mu - 2.0 * mu_a * d_var - mu_b * d_cov)
    g_m2 = scale * d_var
    g_m3 = scale * d_cov
    grad = (
        _filter_adjoint(g_m1, k)
        + 2.0 * a * _filter_adjoint(g_m2, k)
        + b * _filter_adjoint(g_m3, k)
    )
    return float(np.mean(S)), (grad[:, :, 0] if squeeze else grad)


def photometric_loss(render_img: np.ndarray, gt: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """(1-λ)·mean|r - gt| + λ·(1 - SSIM(r, gt)) and d loss / d render."""
    r = np.asarray(render_img, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    _check_same_shape(r, g)
    diff = r - g
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    if lam == 0.0:
        return (1.0 - lam) * l1, grad
    s, ds = ssim_with_grad(r, g)
    return (1.0 - lam) * l1 + lam * (1.0 - s), grad - lam * ds


# ---------------------------------------------------------------------------
# Gaussian pyramid and level schedule
# ---------------------------------------------------------------------------


def _blur_decimate(image: np.ndarray) -> np.ndarray:
    blurred = ndimage.correlate1d(image, _BINOMIAL, axis=0, mode="nearest")
    blurred = ndimage.correlate1d(blurred, _BINOMIAL, axis=1, mode="nearest")
    return blurred[::2, ::2]


def build_gaussian_pyramid(image: np.ndarray, n: int) -> GaussianPyramid:
    """n + 1 levels; level 0 is ``image`` itself, each next level blurred and halved."""
    if n < 0:
        raise ValueError(f"n must be >= 0 (got {n})")
    img = np.asarray(image)
    if min(img.shape[0], img.shape[1]) <= 2**n:
        raise TooManyLevels(f"image {img.shape[1]}x{img.shape[0]} too small for {n + 1} levels")
    levels = [img]
    for _ in range(n):
        levels.append(_blur_decimate(levels[-1].astype(np.float64)))
    return GaussianPyramid(levels)


def gp_level(iteration: int, schedule: TrainSchedule) -> int:
    """Pyramid level supervising ``iteration``: n at the start, 0 from n·iters_per_level on."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0 (got {iteration})")
    return max(0, schedule.n - iteration // schedule.iters_per_level)


def keyframe_pyramid(kf: Keyframe, n: int) -> list[np.ndarray]:
    if kf.pyramid_cache is None or len(kf.pyramid_cache) < n + 1:
        kf.pyramid_cache = build_gaussian_pyramid(kf.image, n).levels
    return kf.pyramid_cache


# ---------------------------------------------------------------------------
# Optimizer state
# ---------------------------------------------------------------------------


class _Moments:
    """First/second moments per primitive id for one parameter class."""

    def __init__(self, shape: tuple[int, ...]) -> None:
        self.shape = shape
        self.rows: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, ids: np.ndarray, grads: np.ndarray, lr: float | np.ndarray, adam: bool) -> np.ndarray:
        if not adam:
            return -np.asarray(lr) * grads
        b1, b2 = _ADAM_BETAS
        out = np.empty_like(grads)
        for row, pid in enumerate(ids):
            m, v, t = self.rows.get(int(pid), (np.zeros(self.shape), np.zeros(self.shape), 0))
            g = grads[row]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            t += 1
            self.rows[int(pid)] = (m, v, t)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            out[row] = -np.asarray(lr) * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        return out

    def forget(self, ids) -> None:
        for pid in ids:
            self.rows.pop(int(pid), None)


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------


def _sample_in_gaussian(prim: HyperPrimitive, rng: np.random.Generator) -> np.ndarray:
    R = quat_to_matrix(prim.rotation / np.linalg.norm(prim.rotation))
    return prim.position + R @ (rng.standard_normal(3) * prim.scale)


def densify_and_prune(
    hmap: HyperMap,
    schedule: TrainSchedule,
    scene_extent: float,
    rng: np.random.Generator | None = None,
    footprints: dict[int, float] | None = None,
    image_dim: float | None = None,
) -> tuple[int, int, int]:
    """Clone/split primitives with large mean screen gradients; prune weak or huge ones.

    A split primitive is replaced by two children.  The first child inherits
    the parent's descriptor and keyframe observations so tracking keeps its
    anchor; a pruned primitive takes its observations with it.
    Returns (n_cloned, n_split, n_pruned); every grad_accum is reset.
    """
    rng = rng or np.random.default_rng(0)
    footprints = footprints or {}
    n_cloned = n_split = n_pruned = 0
    split_limit = _SPLIT_EXTENT_FRACTION * scene_extent
    log_div = math.log(_SPLIT_SCALE_DIV)

    items = hmap.primitive_items()
    room = max(0, schedule.max_primitives - len(items))
    to_remove: list[int] = []
    new_prims: list[tuple[HyperPrimitive, dict[int, int]]] = []
    for pid, prim in items:
        too_big = image_dim is not None and footprints.get(pid, 0.0) > _FOOTPRINT_MAX_FRACTION * image_dim
        if prim.opacity < schedule.opacity_prune_threshold or too_big:
            to_remove.append(pid)
            n_pruned += 1
            continue
        if prim.grad_count == 0 or room <= 0:
            continue
        if prim.grad_accum / prim.grad_count < schedule.densify_grad_threshold:
            continue
        if float(np.max(prim.scale)) <= split_limit:
            child = prim.copy()
            child.descriptor = None
            child.position = _sample_in_gaussian(prim, rng)
            new_prims.append((child, {}))
            n_cloned += 1
            room -= 1
        else:
            children = [prim.copy() for _ in range(2)]
            for child in children:
                child.position = _sample_in_gaussian(prim, rng)
                child.log_scale = prim.log_scale - log_div
            children[1].descriptor = None
            new_prims.append((children[0], hmap.observers(pid)))
            new_prims.append((children[1], {}))
            to_remove.append(pid)
            room -= 1
            n_split += 1

    for pid in to_remove:
        hmap.remove_primitive(pid)
    for child, observers in new_prims:
        child.grad_accum, child.grad_count = 0.0, 0
        child_id = hmap.add_primitive(child)
        for kf_id, kp_idx in observers.items():
            hmap.add_observation(kf_id, kp_idx, child_id)
    with hmap.primitives_lock.write():
        for prim in hmap.primitives.values():
            prim.grad_accum, prim.grad_count = 0.0, 0
    return n_cloned, n_split, n_pruned


# ---------------------------------------------------------------------------
# Geometry-based densification
# ---------------------------------------------------------------------------


def interpolate_depths(
    query_uv: np.ndarray,
    active_uv: np.ndarray,
    active_depth: np.ndarray,
    k: int = 4,
    radius: float = 100.0,
) -> np.ndarray:
    """Inverse-distance-weighted depth from the ``k`` nearest active keypoints.

    NaN where no active keypoint lies within ``radius`` pixels.
    """
    out = np.full(len(query_uv), np.nan)
    if len(active_uv) == 0 or len(query_uv) == 0:
        return out
    tree = cKDTree(active_uv)
    k_eff = min(k, len(active_uv))
    dist, idx = tree.query(query_uv, k=k_eff, distance_upper_bound=radius)
    dist = np.asarray(dist).reshape(len(query_uv), k_eff)
    idx = np.asarray(idx).reshape(len(query_uv), k_eff)
    for row in range(len(query_uv)):
        ok = np.isfinite(dist[row])
        if not ok.any():
            continue
        d, j = dist[row][ok], idx[row][ok]
        if np.any(d == 0.0):
            out[row] = float(active_depth[j[d == 0.0][0]])
            continue
        w = 1.0 / d
        out[row] = float(np.sum(w * active_depth[j]) / np.sum(w))
    return out


def geometry_densify(
    kf: Keyframe,
    hmap: HyperMap,
    mode: CameraMode | str,
    k_neighbors: int = 4,
    radius_px: float = 100.0,
) -> list[int]:
    """Temporary primitives at the keyframe's inactive keypoints."""
    mode = CameraMode(mode)
    inactive = kf.inactive_keypoints()
    if len(inactive) == 0:
        return []
    uv = kf.keypoints[inactive, :2]
    K = kf.intrinsics

    if mode is CameraMode.RGBD:
        if kf.depth is None:
            return []
        h, w = kf.depth.shape
        cols = np.clip(np.round(uv[:, 0]).astype(int), 0, w - 1)
        rows = np.clip(np.round(uv[:, 1]).astype(int), 0, h - 1)
        depths = kf.depth[rows, cols].astype(np.float64)
    else:
        active_idx = np.array(sorted(kf.observations), dtype=np.int64)
        with hmap.primitives_lock.read():
            points = np.array(
                [hmap.primitives[kf.observations[i]].position for i in active_idx]
            ).reshape(-1, 3)
        active_depth = kf.pose.transform(points)[:, 2] if len(points) else np.zeros(0)
        front = active_depth > 0
        depths = interpolate_depths(
            uv, kf.keypoints[active_idx[front], :2], active_depth[front], k_neighbors, radius_px
        )

    created: list[int] = []
    focal = 0.5 * (K.fx + K.fy)
    for (u, v), d in zip(uv, depths):
        if not (np.isfinite(d) and d > 0):
            continue
        position = backproject(float(u), float(v), float(d), kf.pose, K)
        prim = make_primitive(position, float(d), focal, sample_color(kf.image, u, v), temporary=True)
        created.append(hmap.add_primitive(prim))
    return created


# ---------------------------------------------------------------------------
# PhotoMapper
# ---------------------------------------------------------------------------


@dataclass
class PhotoMapper:
    """Owns the optimiser state and drives photorealistic training."""

    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    raster: RasterSettings = field(default_factory=RasterSettings)
    seed: int = 0
    verbose: bool = False

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.kf_iterations: dict[int, int] = {}
        self.global_step = 0
        self.footprints: dict[int, float] = {}
        self.last_loss: float | None = None
        self.densify_stats = [0, 0, 0]
        self._moments = {
            "position": _Moments((3,)),
            "rotation": _Moments((4,)),
            "log_scale": _Moments((3,)),
            "opacity_logit": _Moments(()),
            "sh": _Moments((16, 3)),
        }

    def _log(self, msg: str) -> None:
        if self.verbose:
            print(f"[photomap] {msg}", file=sys.stderr)

    # -- replay -------------------------------------------------------------

    def choose_keyframe(self, hmap: HyperMap) -> Keyframe | None:
        """Alternate the newest keyframe and a uniformly random earlier one."""
        with hmap.keyframes_lock.read():
            ids = sorted(hmap.keyframes)
            if not ids:
                return None
            newest = ids[-1]
            if self.global_step % 2 == 0 or len(ids) == 1:
                return hmap.keyframes[newest]
            return hmap.keyframes[ids[int(self.rng.integers(0, len(ids) - 1))]]

    # -- one iteration ------------------------------------------------------

    def optimize_iteration(self, hmap: HyperMap, kf: Keyframe, iteration: int | None = None) -> float:
        """Render ``kf`` at its current pyramid level, back-propagate, step once."""
        it = self.kf_iterations.get(kf.id, 0) if iteration is None else iteration
        level = gp_level(it, self.schedule)
        gt = keyframe_pyramid(kf, self.schedule.n)[level]
        K_level = kf.intrinsics.scaled(level)
        if gt.shape[:2] != (K_level.height, K_level.width):
            raise DimensionMismatch(
                f"pyramid level {level} is {gt.shape[1]}x{gt.shape[0]}, intrinsics expect "
                f"{K_level.width}x{K_level.height}"
            )

        items = hmap.primitive_items()
        ids = [pid for pid, _ in items]
        batch = GaussianBatch.from_primitives([p for _, p in items], ids)
        out = render(batch, kf.pose, K_level, self.raster)
        loss, dl_dimg = photometric_loss(out.image, gt, self.schedule.lambda_dssim)
        grads = render_backward(out, dl_dimg, batch, accumulate=False)

        self._apply(hmap, grads, out.projection.radius, level)
        self.kf_iterations[kf.id] = it + 1
        self.last_loss = loss
        return loss

    def _apply(self, hmap: HyperMap, grads, radii: np.ndarray, level: int) -> None:
        s = self.schedule
        adam = s.optimizer == "adam"
        extent = hmap.scene_extent()
        with hmap.primitives_lock.write():
            alive = np.array([pid in hmap.primitives for pid in grads.ids], dtype=bool)
            sel = np.flatnonzero(alive & grads.visible)
            if len(sel) == 0:
                return
            ids = grads.ids[sel]
            sh_lr = np.full((16, 3), s.lr_sh_rest)
            sh_lr[0] = s.lr_sh_dc
            d_pos = self._moments["position"].step(ids, grads.position[sel], s.lr_position * extent, adam)
            d_rot = self._moments["rotation"].step(ids, grads.rotation[sel], s.lr_rotation, adam)
            d_scale = self._moments["log_scale"].step(ids, grads.log_scale[sel], s.lr_scale, adam)
            d_op = self._moments["opacity_logit"].step(ids, grads.opacity_logit[sel], s.lr_opacity, adam)
            d_sh = self._moments["sh"].step(ids, grads.sh[sel], sh_lr, adam)
            factor = 2.0**level
            for row, i in enumerate(sel):
                pid = int(grads.ids[i])
                prim = hmap.primitives[pid]
                if not (s.freeze_tracked_positions and prim.descriptor is not None):
                    prim.position = prim.position + d_pos[row]
                q = prim.rotation + d_rot[row]
                prim.rotation = q / np.linalg.norm(q)
                prim.log_scale = np.clip(prim.log_scale + d_scale[row], _LOG_SCALE_MIN, _LOG_SCALE_MAX)
                prim.opacity_logit = float(prim.opacity_logit + d_op[row])
                prim.sh = prim.sh + d_sh[row]
                prim.grad_accum += float(grads.screen_grad_norm[i])
                prim.grad_count += 1
                self.footprints[pid] = max(self.footprints.get(pid, 0.0), float(radii[i]) * factor)

    # -- driver -------------------------------------------------------------

    def step(self, hmap: HyperMap) -> float | None:
        """One replayed iteration plus densification on its cadence."""
        kf = self.choose_keyframe(hmap)
        if kf is None:
            return None
        loss = self.optimize_iteration(hmap, kf)
        self.global_step += 1
        if self.global_step % self.schedule.densify_interval == 0:
            dims = max(kf.intrinsics.width, kf.intrinsics.height)
            stats = densify_and_prune(
                hmap, self.schedule, hmap.scene_extent(), self.rng, self.footprints, dims
            )
            self.forget_missing(hmap)
            self.footprints.clear()
            self.densify_stats = [a + b for a, b in zip(self.densify_stats, stats)]
            self._log(
                f"step {self.global_step}: loss={loss:.5f} cloned={stats[0]} split={stats[1]} "
                f"pruned={stats[2]} primitives={len(hmap.primitives)}"
            )
        return loss

    def forget_missing(self, hmap: HyperMap) -> None:
        with hmap.primitives_lock.read():
            live = set(hmap.primitives)
        for moments in self._moments.values():
            moments.forget([pid for pid in list(moments.rows) if pid not in live])
