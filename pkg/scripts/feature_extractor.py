#!/usr/bin/env python3
"""Feature Extractor — oriented corners, 256-bit binary descriptors, matching.

Detection runs per pyramid octave (scale factor 1.2, 8 octaves by default):
Harris-response local maxima refined to sub-pixel, oriented by the intensity
centroid of a 31 px circular patch, then bucketed on a 32 px grid so no cell
holds more than its quota.  Descriptors are OpenCV's oriented BRIEF (ORB)
computed at each keypoint's own octave.

Matching is brute-force Hamming nearest neighbour with an absolute distance
cap, a ratio test against the second-best distance and mutual-best filtering,
so the result is injective on both sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

PATCH_SIZE: int = 31
_HALF_PATCH: int = PATCH_SIZE // 2
_BORDER: int = _HALF_PATCH + 1
GRID_CELL_PX: int = 32
DEFAULT_N_OCTAVES: int = 8
DEFAULT_SCALE_FACTOR: float = 1.2
DEFAULT_RATIO: float = 0.75
DEFAULT_MAX_HAMMING: int = 50

_HARRIS_K: float = 0.04
_HARRIS_BLOCK: int = 3
_HARRIS_QUALITY: float = 0.01      # relative to the strongest response in the octave
_HARRIS_ABS_MIN: float = 1e-7      # rejects flat images outright
_MATCH_CHUNK: int = 1024

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)

# Circular patch row extents used for the intensity centroid.
_UMAX = np.array(
    [int(math.floor(math.sqrt(_HALF_PATCH**2 - v * v) + 1e-9)) for v in range(_HALF_PATCH + 1)]
)


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class ImageTooSmall(ValueError):
    """Raised when the image cannot hold one descriptor patch."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keypoint:
    """A detected corner in level-0 pixel coordinates."""

    u: float
    v: float
    octave: int
    response: float
    angle: float  # radians


def keypoints_to_array(keypoints: list[Keypoint]) -> np.ndarray:
    """Rows of (u, v, octave) as stored on a Keyframe."""
    if not keypoints:
        return np.zeros((0, 3))
    return np.array([[k.u, k.v, k.octave] for k in keypoints], dtype=np.float64)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def to_gray_u8(image: np.ndarray) -> np.ndarray:
    """Grayscale uint8 view of a float [0,1] or uint8 image (gray or RGB)."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.dtype != np.uint8:
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            return np.round(cv2.cvtColor(img, cv2.COLOR_RGB2GRAY) * 255.0).astype(np.uint8)
        return cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
    if img.dtype != np.uint8:
        return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img


def _build_pyramid(gray: np.ndarray, n_octaves: int, scale_factor: float) -> list[np.ndarray]:
    levels = [gray]
    h, w = gray.shape
    for level in range(1, n_octaves):
        s = scale_factor**level
        lw, lh = int(round(w / s)), int(round(h / s))
        if min(lw, lh) < 2 * _BORDER + 1:
            break
        levels.append(cv2.resize(gray, (lw, lh), interpolation=cv2.INTER_LINEAR))
    return levels


def _harris_candidates(level_img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sub-pixel Harris maxima (x, y) and their responses inside the border."""
    f = level_img.astype(np.float32) / 255.0
    response = cv2.cornerHarris(f, _HARRIS_BLOCK, 3, _HARRIS_K)
    peak = float(response.max()) if response.size else 0.0
    if peak <= _HARRIS_ABS_MIN:
        return np.zeros((0, 2), np.float32), np.zeros(0)
    local_max = response >= cv2.dilate(response, np.ones((3, 3), np.uint8))
    mask = local_max & (response > _HARRIS_QUALITY * peak)
    mask[:_BORDER, :] = False
    mask[-_BORDER:, :] = False
    mask[:, :_BORDER] = False
    mask[:, -_BORDER:] = False
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return np.zeros((0, 2), np.float32), np.zeros(0)
    pts = np.stack([xs, ys], axis=1).astype(np.float32).reshape(-1, 1, 2)
    criteria = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_MAX_ITER, 20, 0.01)
    refined = cv2.cornerSubPix(f, pts.copy(), (2, 2), (-1, -1), criteria).reshape(-1, 2)
    # Reject refinements that wandered off the integer maximum.
    drift = np.abs(refined - pts.reshape(-1, 2)).max(axis=1)
    refined[drift > 1.5] = pts.reshape(-1, 2)[drift > 1.5]
    return refined, response[ys, xs].astype(np.float64)


def intensity_centroid_angle(level_img: np.ndarray, x: float, y: float) -> float:
    """Orientation (radians) of the circular patch centred at (x, y)."""
    cx, cy = int(round(x)), int(round(y))
    img = level_img.astype(np.float64)
    m01 = 0.0
    m10 = 0.0
    for dv in range(-_HALF_PATCH, _HALF_PATCH + 1):
        du = _UMAX[abs(dv)]
        row = img[cy + dv, cx - du: cx + du + 1]
        us = np.arange(-du, du + 1)
        m10 += float(us @ row)
        m01 += dv * float(row.sum())
    return math.atan2(m01, m10)


def _grid_bucket(
    candidates: list[tuple[float, float, float, int, float, float]],
    width: int,
    height: int,
    target_count: int,
) -> list[tuple[float, float, float, int, float, float]]:
    """Keep the strongest candidates with at most ``quota`` per grid cell."""
    cols = max(1, math.ceil(width / GRID_CELL_PX))
    rows = max(1, math.ceil(height / GRID_CELL_PX))
    quota = max(1, math.ceil(target_count / (cols * rows)))
    ordered = sorted(candidates, key=lambda c: (-c[2], c[3], c[1], c[0]))
    counts: dict[tuple[int, int], int] = {}
    kept = []
    for cand in ordered:
        cell = (min(int(cand[0] // GRID_CELL_PX), cols - 1), min(int(cand[1] // GRID_CELL_PX), rows - 1))
        if counts.get(cell, 0) >= quota:
            continue
        counts[cell] = counts.get(cell, 0) + 1
        kept.append(cand)
        if len(kept) >= target_count:
            break
    return kept


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def compute_descriptors(
    image: np.ndarray,
    keypoints: list[Keypoint],
    n_octaves: int = DEFAULT_N_OCTAVES,
    scale_factor: float = DEFAULT_SCALE_FACTOR,
) -> tuple[list[Keypoint], np.ndarray]:
    """Oriented BRIEF descriptors for the given keypoints.

    Keypoints OpenCV refuses (too close to the border) are dropped; the
    returned list is aligned row-for-row with the descriptor array.
    """
    gray = to_gray_u8(image)
    if not keypoints:
        return [], np.zeros((0, 32), np.uint8)
    orb = cv2.ORB_create(
        nfeatures=max(len(keypoints), 1),
        scaleFactor=scale_factor,
        nlevels=n_octaves,
        edgeThreshold=_BORDER,
        patchSize=PATCH_SIZE,
    )
    cv_kps = [
        cv2.KeyPoint(
            float(k.u), float(k.v), float(PATCH_SIZE * scale_factor**k.octave),
            float(math.degrees(k.angle) % 360.0), float(k.response), int(k.octave), i,
        )
        for i, k in enumerate(keypoints)
    ]
    out_kps, desc = orb.compute(gray, cv_kps)
    if desc is None or not out_kps:
        return [], np.zeros((0, 32), np.uint8)
    kept = [keypoints[kp.class_id] for kp in out_kps]
    return kept, np.ascontiguousarray(desc, dtype=np.uint8)


def extract_features(
    image: np.ndarray,
    target_count: int = 1000,
    n_octaves: int = DEFAULT_N_OCTAVES,
    scale_factor: float = DEFAULT_SCALE_FACTOR,
) -> tuple[list[Keypoint], np.ndarray]:
    """Detect up to ``target_count`` grid-bucketed oriented corners with descriptors."""
    if target_count < 1:
        raise ValueError(f"target_count must be >= 1 (got {target_count})")
    gray = to_gray_u8(image)
    if gray.size == 0:
        raise ImageTooSmall("empty image")
    h, w = gray.shape
    if min(h, w) < PATCH_SIZE:
        raise ImageTooSmall(f"image {w}x{h} smaller than the {PATCH_SIZE}px patch")

    levels = _build_pyramid(gray, n_octaves, scale_factor)
    candidates: list[tuple[float, float, float, int, float, float]] = []
    for octave, level_img in enumerate(levels):
        pts, responses = _harris_candidates(level_img)
        s = scale_factor**octave
        lh, lw = level_img.shape
        for (x, y), r in zip(pts, responses):
            if not (_BORDER <= x < lw - _BORDER and _BORDER <= y < lh - _BORDER):
                continue
            u0 = (float(x) + 0.5) * s - 0.5
            v0 = (float(y) + 0.5) * s - 0.5
            if not (_BORDER <= u0 < w - _BORDER and _BORDER <= v0 < h - _BORDER):
                continue
            candidates.append((u0, v0, float(r), octave, float(x), float(y)))

    if not candidates:
        return [], np.zeros((0, 32), np.uint8)

    kept = _grid_bucket(candidates, w, h, target_count)
    keypoints = [
        Keypoint(u, v, octave, r, intensity_centroid_angle(levels[octave], x, y))
        for u, v, r, octave, x, y in kept
    ]
    return compute_descriptors(gray, keypoints, n_octaves, scale_factor)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two 32-byte descriptors."""
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances (|a|×|b|, int32)."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1, 32)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, 32)
    out = np.empty((len(a), len(b)), dtype=np.int32)
    for start in range(0, len(a), _MATCH_CHUNK):
        block = np.bitwise_xor(a[start:start + _MATCH_CHUNK, None, :], b[None, :, :])
        out[start:start + _MATCH_CHUNK] = _POPCOUNT[block].sum(axis=2)
    return out


def match_descriptors(
    a: np.ndarray,
    b: np.ndarray,
    max_hamming: int = DEFAULT_MAX_HAMMING,
    ratio: float = DEFAULT_RATIO,
) -> list[tuple[int, int]]:
    """Ratio-tested, mutual-best Hamming matches as (idx_a, idx_b) pairs."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1] (got {ratio})")
    if not 0 <= max_hamming <= 256:
        raise ValueError(f"max_hamming must be in [0, 256] (got {max_hamming})")
    a = np.asarray(a, dtype=np.uint8).reshape(-1, 32)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, 32)
    if len(a) == 0 or len(b) == 0:
        return []

    dist = hamming_matrix(a, b)
    best_b = np.argmin(dist, axis=1)
    d1 = dist[np.arange(len(a)), best_b]
    if len(b) > 1:
        second = np.partition(dist, 1, axis=1)[:, 1].astype(np.float64)
    else:
        second = np.full(len(a), np.inf)
    best_a_for_b = np.argmin(dist, axis=0)

    keep = (d1 <= max_hamming) & (d1 < ratio * second)
    keep &= best_a_for_b[best_b] == np.arange(len(a))
    return [(int(i), int(best_b[i])) for i in np.flatnonzero(keep)]
