#!/usr/bin/env python3
"""Evaluation — trajectory and image-quality metrics for a finished run.

  compute_ate     RMSE and population STD of the translational residuals
                  after aligning the estimate onto ground truth (Sim(3) for
                  monocular runs, SE(3) for RGB-D)
  compute_psnr    10·log10(1/MSE) for images in [0, 1]; identical images
                  report the 99 dB cap
  evaluate_renders  mean PSNR / SSIM of keyframe renders and rendering FPS
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from hyper_core import TIMESTAMP_MAX_DT, HyperMap, Keyframe, Pose, associated_centers, umeyama
from photomap import DimensionMismatch, ssim
from splat_rasterizer import GaussianBatch, RasterSettings, render

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

PSNR_CAP_DB: float = 99.0
ALIGNMENTS: tuple[str, ...] = ("sim3", "se3")


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class RenderMetrics:
    psnr: float | None
    ssim: float | None
    rendering_fps: float
    renders: dict[int, np.ndarray]


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def compute_ate(
    est: list[tuple[float, Pose]],
    gt: list[tuple[float, Pose]],
    align: str = "se3",
    max_dt: float = TIMESTAMP_MAX_DT,
) -> tuple[float, float]:
    """(rmse, std) in metres over timestamp-associated camera centres.

    Raises ``TooFewPairs`` with fewer than three associated poses.
    """
    if align not in ALIGNMENTS:
        raise ValueError(f"align must be one of {ALIGNMENTS} (got {align!r})")
    src, dst = associated_centers(est, gt, max_dt)
    S = umeyama(src, dst, with_scale=align == "sim3")
    residuals = np.linalg.norm(S.apply(src) - dst, axis=1)
    return float(np.sqrt(np.mean(residuals**2))), float(np.std(residuals))


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"images differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def evaluate_renders(
    hmap: HyperMap,
    keyframes: list[Keyframe],
    settings: RasterSettings | None = None,
) -> RenderMetrics:
    """Render every keyframe at its pose and compare with its stored image."""
    items = hmap.primitive_items()
    batch = GaussianBatch.from_primitives([p for _, p in items], [pid for pid, _ in items])
    psnrs, ssims, renders = [], [], {}
    elapsed = 0.0
    for kf in keyframes:
        t0 = time.perf_counter()
        image = np.clip(render(batch, kf.pose, kf.intrinsics, settings).image, 0.0, 1.0)
        elapsed += time.perf_counter() - t0
        gt = np.asarray(kf.image, dtype=np.float64)
        if gt.ndim == 2:
            gt = np.repeat(gt[..., None], 3, axis=2)
        psnrs.append(compute_psnr(image, gt))
        ssims.append(ssim(image, gt))
        renders[kf.id] = image
    if not keyframes:
        return RenderMetrics(None, None, 0.0, {})
    fps = len(keyframes) / elapsed if elapsed > 0 else 0.0
    return RenderMetrics(float(np.mean(psnrs)), float(np.mean(ssims)), fps, renders)
