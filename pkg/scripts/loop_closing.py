#!/usr/bin/env python3
"""Loop Closing — revisit detection and similarity correction of the local map.

Detection scores every earlier keyframe that is at least ``gap_min``
keyframes older than the query and not covisible with it.  The score is the
fraction of query descriptors with a Hamming match within ``max_hamming`` in
the candidate.  The best candidate above ``score_min`` is verified
geometrically: query-side 3D points are paired with the primitives the
candidate observes, and a Sim(3) is fitted by RANSAC over minimal Umeyama
solutions.

Correction moves the query's covisibility window (keyframe poses and the
primitives those keyframes observe) by that Sim(3) and links the two loop
ends in the covisibility graph.  Applying the inverse Sim(3) with the same
candidate undoes it.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from feature_extractor import hamming_matrix, match_descriptors
from hyper_core import (
    HyperMap,
    InvalidDepth,
    Keyframe,
    Sim3,
    TooFewPairs,
    backproject,
    quat_multiply,
    umeyama,
)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

LOOP_GAP_MIN: int = 30
LOOP_SCORE_MIN: float = 0.25
LOOP_MAX_HAMMING: int = 50
SIM3_INLIER_TAU: float = 0.05      # metres at unit scale
SIM3_INLIER_MIN: int = 20
_RANSAC_ITERATIONS: int = 200


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class NoConsensus(RuntimeError):
    """Raised when no Sim(3) hypothesis gathers ``inlier_min`` inliers."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoopParams:
    gap_min: int = LOOP_GAP_MIN
    score_min: float = LOOP_SCORE_MIN
    max_hamming: int = LOOP_MAX_HAMMING
    tau: float = SIM3_INLIER_TAU
    inlier_min: int = SIM3_INLIER_MIN
    ransac_iterations: int = _RANSAC_ITERATIONS
    with_scale: bool = True


@dataclass
class LoopCandidate:
    query_kf: int
    match_kf: int
    matches: list[tuple[int, int]] = field(default_factory=list)   # (query keypoint, match primitive)
    sim3: Sim3 = field(default_factory=Sim3.identity)
    inliers: int = 0
    score: float = 0.0


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _log(msg: str, verbose: bool) -> None:
    if verbose:
        print(f"[loop_closing] {msg}", file=sys.stderr)


def descriptor_set_score(query: np.ndarray, candidate: np.ndarray, max_hamming: int = LOOP_MAX_HAMMING) -> float:
    """Fraction of ``query`` descriptors with some match within ``max_hamming`` bits."""
    if len(query) == 0 or len(candidate) == 0:
        return 0.0
    best = hamming_matrix(query, candidate).min(axis=1)
    return float(np.mean(best <= max_hamming))


def _query_point(kf: Keyframe, kp_idx: int, hmap: HyperMap) -> np.ndarray | None:
    pid = kf.observations.get(kp_idx)
    if pid is not None:
        with hmap.primitives_lock.read():
            prim = hmap.primitives.get(pid)
            if prim is not None:
                return prim.position.copy()
    if kf.depth is None:
        return None
    u, v = kf.keypoints[kp_idx, :2]
    h, w = kf.depth.shape
    d = float(kf.depth[int(np.clip(round(v), 0, h - 1)), int(np.clip(round(u), 0, w - 1))])
    try:
        return backproject(float(u), float(v), d, kf.pose, kf.intrinsics)
    except InvalidDepth:
        return None


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def estimate_sim3(
    src: np.ndarray,
    dst: np.ndarray,
    params: LoopParams | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Sim3, np.ndarray]:
    """RANSAC Sim(3) mapping ``src`` onto ``dst``, refined on the inliers."""
    params = params or LoopParams()
    rng = rng or np.random.default_rng(0)
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(src) != len(dst):
        raise TooFewPairs(f"estimate_sim3 needs >= 3 paired points (got {len(src)}, {len(dst)})")

    def inliers_of(S: Sim3) -> np.ndarray:
        return np.linalg.norm(S.apply(src) - dst, axis=1) < params.tau

    best_mask = np.zeros(len(src), dtype=bool)
    for _ in range(params.ransac_iterations):
        sample = rng.choice(len(src), size=3, replace=False)
        try:
            S = umeyama(src[sample], dst[sample], with_scale=params.with_scale)
        except (ValueError, np.linalg.LinAlgError):
            continue
        mask = inliers_of(S)
        if mask.sum() > best_mask.sum():
            best_mask = mask
            if mask.all():
                break
    if best_mask.sum() < max(params.inlier_min, 3):
        raise NoConsensus(f"best Sim3 hypothesis has {int(best_mask.sum())} inliers < {params.inlier_min}")

    S = umeyama(src[best_mask], dst[best_mask], with_scale=params.with_scale)
    mask = inliers_of(S)
    if mask.sum() >= best_mask.sum() and not np.array_equal(mask, best_mask):
        S = umeyama(src[mask], dst[mask], with_scale=params.with_scale)
        mask = inliers_of(S)
    return S, mask


def detect_loop(
    query: Keyframe,
    hmap: HyperMap,
    params: LoopParams | None = None,
    rng: np.random.Generator | None = None,
    verbose: bool = False,
) -> LoopCandidate | None:
    """Best verified revisit of an old, non-covisible keyframe, or None."""
    params = params or LoopParams()
    with hmap.keyframes_lock.read():
        ids = sorted(hmap.keyframes)
        if len(ids) < params.gap_min or query.id not in hmap.keyframes:
            return None
        pos = ids.index(query.id)
        old = ids[:max(0, pos - params.gap_min + 1)]
        covisible = set(hmap.covisible_keyframes(query.id, min_shared=1))
        pool = [hmap.keyframes[k] for k in old if k not in covisible and k != query.id]

    scored = [(descriptor_set_score(query.descriptors, kf.descriptors, params.max_hamming), kf) for kf in pool]
    scored = [(s, kf) for s, kf in scored if s >= params.score_min]
    if not scored:
        return None
    score, match = max(scored, key=lambda sk: (sk[0], -sk[1].id))
    _log(f"keyframe {query.id}: best candidate {match.id} score={score:.3f}", verbose)

    src, dst, matches = [], [], []
    for i, j in match_descriptors(query.descriptors, match.descriptors, params.max_hamming):
        pid = match.observations.get(j)
        if pid is None:
            continue
        p_query = _query_point(query, i, hmap)
        if p_query is None:
            continue
        with hmap.primitives_lock.read():
            prim = hmap.primitives.get(pid)
            if prim is None:
                continue
            dst.append(prim.position.copy())
        src.append(p_query)
        matches.append((i, pid))
    if len(src) < max(params.inlier_min, 3):
        _log(f"candidate {match.id} rejected: {len(src)} 3D-3D pairs", verbose)
        return None
    try:
        sim3, mask = estimate_sim3(np.array(src), np.array(dst), params, rng)
    except (NoConsensus, TooFewPairs) as exc:
        _log(f"candidate {match.id} rejected: {exc}", verbose)
        return None
    return LoopCandidate(
        query_kf=query.id,
        match_kf=match.id,
        matches=[m for m, ok in zip(matches, mask) if ok],
        sim3=sim3,
        inliers=int(mask.sum()),
        score=score,
    )


def correction_window(hmap: HyperMap, candidate: LoopCandidate) -> tuple[list[int], list[int]]:
    """Keyframes and primitives moved by a correction of ``candidate``."""
    with hmap.keyframes_lock.read():
        window = [candidate.query_kf] + hmap.covisible_keyframes(candidate.query_kf)
        window = sorted(k for k in set(window) if k != candidate.match_kf)
        anchored = set(hmap.keyframes[candidate.match_kf].observations.values())
        prims = sorted({
            pid for k in window for pid in hmap.keyframes[k].observations.values()
        } - anchored)
    return window, prims


def apply_correction(hmap: HyperMap, candidate: LoopCandidate) -> list[int]:
    """Move the query's window by ``candidate.sim3``; returns the corrected keyframe ids."""
    window, prims = correction_window(hmap, candidate)
    S = candidate.sim3
    if S.is_identity():
        return window
    log_s = math.log(S.scale)
    with hmap.keyframes_lock.write(), hmap.primitives_lock.write():
        for k in window:
            kf = hmap.keyframes[k]
            kf.pose = S.correct_pose(kf.pose)
        for pid in prims:
            prim = hmap.primitives.get(pid)
            if prim is None:
                continue
            prim.position = S.apply(prim.position)
            prim.log_scale = prim.log_scale + log_s
            q = quat_multiply(S.rotation, prim.rotation)
            prim.rotation = q / np.linalg.norm(q)
        hmap.link_keyframes(
            candidate.query_kf, candidate.match_kf, max(candidate.inliers, hmap.covisibility_min_shared)
        )
    return window


def invert(candidate: LoopCandidate) -> LoopCandidate:
    """Same loop with the inverse similarity (undoes ``apply_correction``)."""
    return replace(candidate, sim3=candidate.sim3.inverse())
