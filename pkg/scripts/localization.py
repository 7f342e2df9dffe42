#!/usr/bin/env python3
"""Localization — pose tracking and sparse geometric mapping.

  huber                 robust cost ρ(r²) and its IRLS weight dρ/dr²
  motion_only_ba        6-DoF pose refinement against fixed primitives, run in
                        rounds; matches whose χ² exceeds δ² after a round sit
                        out the next one
  local_ba              joint refinement of the covisibility window around an
                        anchor keyframe and the primitives it observes; point
                        blocks are eliminated with the Schur complement
  select_keyframe       inlier / ratio / elapsed-frame keyframe policy
  create_map_points     new primitives from RGB-D depth or two-view triangulation
  initialize_monocular  essential-matrix bootstrap of a monocular map
  search_by_projection  2D-3D association around projected primitives

Residuals are ``e = measured - π(R·P + t)`` in pixels, weighted by the
octave information ``scale_factor^(-2·octave)``.  Pose increments are twists
ξ = (ω, v) applied on the left: ``exp(ξ)·T``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.spatial import cKDTree

from feature_extractor import DEFAULT_SCALE_FACTOR, hamming_matrix, match_descriptors
from hyper_core import (
    Z_MIN,
    CheiralityViolation,
    DegenerateParallax,
    HighReprojectionError,
    HyperMap,
    Intrinsics,
    Keyframe,
    Pose,
    backproject,
    make_primitive,
    sample_color,
    skew,
    triangulate,
)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

HUBER_DELTA_MONO: float = math.sqrt(5.99)   # 2-DoF χ² at 95 %
MIN_TRACKING_MATCHES: int = 10
KEYFRAME_MIN_INLIERS: int = 40
KEYFRAME_REF_RATIO: float = 0.9
KEYFRAME_MAX_GAP: int = 30
BOOTSTRAP_MIN_POINTS: int = 50
BOOTSTRAP_MIN_PARALLAX_DEG: float = 1.0
_MAX_TRIANGULATION_NEIGHBORS: int = 10
_SEARCH_RADIUS_PX: float = 15.0


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class TooFewMatches(RuntimeError):
    """Raised when motion-only BA gets fewer than ``MIN_TRACKING_MATCHES`` pairs."""


class Diverged(RuntimeError):
    """Raised when an optimisation cost becomes non-finite."""


class EmptyLocalWindow(RuntimeError):
    """Raised when the local BA window has no primitives to optimise."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LMConfig:
    max_iterations: int = 10
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    huber_delta: float = HUBER_DELTA_MONO
    convergence_tol: float = 1e-10
    rounds: int = 4

    def __post_init__(self) -> None:
        if min(self.max_iterations, self.rounds) < 1:
            raise ValueError("max_iterations and rounds must be >= 1")
        if not (self.initial_damping > 0 and self.huber_delta > 0 and self.convergence_tol > 0):
            raise ValueError("damping, huber_delta and convergence_tol must be positive")
        if not self.damping_up > 1.0 > self.damping_down > 0.0:
            raise ValueError(
                f"need damping_up > 1 > damping_down > 0 (got {self.damping_up}, {self.damping_down})"
            )


@dataclass(frozen=True)
class ReprojectionFactor:
    keyframe_id: int
    keypoint_index: int
    primitive_id: int
    measured: np.ndarray
    info_weight: float

    def __post_init__(self) -> None:
        if not self.info_weight > 0:
            raise ValueError(f"info_weight must be positive (got {self.info_weight})")


@dataclass(frozen=True)
class FrameStats:
    n_inliers: int
    reference_inliers: int
    frames_since_keyframe: int


@dataclass(frozen=True)
class KeyframePolicy:
    k_min: int = KEYFRAME_MIN_INLIERS
    r_ref: float = KEYFRAME_REF_RATIO
    f_max: int = KEYFRAME_MAX_GAP


@dataclass
class LocalBAResult:
    poses: dict[int, Pose]
    points: dict[int, np.ndarray]
    fixed_keyframes: list[int]
    costs: list[float] = field(default_factory=list)
    removed_observations: int = 0


@dataclass
class MonocularInit:
    """Second-view pose (first view at identity), points in the first camera frame."""

    pose: Pose
    points: np.ndarray
    pairs: list[tuple[int, int]]
    median_parallax_deg: float


def info_weight(octave: int | float, scale_factor: float = DEFAULT_SCALE_FACTOR) -> float:
    return float(scale_factor ** (-2.0 * octave))


# ---------------------------------------------------------------------------
# Robust cost and reprojection Jacobians
# ---------------------------------------------------------------------------


def huber(r2: float | np.ndarray, delta: float) -> tuple:
    """Huber cost of a squared residual and its IRLS weight dρ/dr²."""
    r2 = np.asarray(r2, dtype=np.float64)
    r = np.sqrt(r2)
    inside = r <= delta
    cost = np.where(inside, r2, 2.0 * delta * r - delta * delta)
    with np.errstate(divide="ignore"):
        weight = np.where(inside, 1.0, delta / np.where(r > 0, r, 1.0))
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


def _projection_jacobian(p_cam: np.ndarray, K: Intrinsics) -> np.ndarray:
    """d π / d p_cam, N×2×3."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((len(p_cam), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2
    return J


def reprojection_residuals(
    pose: Pose, points: np.ndarray, measured: np.ndarray, K: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Residuals ``measured - π`` (N×2) and camera depths (N)."""
    p_cam = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = p_cam[:, 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    proj = np.stack([K.fx * p_cam[:, 0] / zs + K.cx, K.fy * p_cam[:, 1] / zs + K.cy], axis=1)
    return np.asarray(measured, dtype=np.float64).reshape(-1, 2) - proj, z


def reprojection_jacobians(
    pose: Pose, points: np.ndarray, K: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """de/dξ (N×2×6) and de/dP (N×2×3) of ``e = measured - π(R·P + t)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p_cam = pose.transform(pts)
    Jp = _projection_jacobian(p_cam, K)
    d_pc_dxi = np.zeros((len(pts), 3, 6))
    d_pc_dxi[:, :, :3] = -np.stack([skew(pc) for pc in p_cam]) if len(pts) else 0.0
    d_pc_dxi[:, :, 3:] = np.eye(3)
    J_pose = -Jp @ d_pc_dxi
    J_point = -Jp @ pose.R
    return J_pose, J_point


# ---------------------------------------------------------------------------
# Motion-only bundle adjustment
# ---------------------------------------------------------------------------


def _robust_pose_cost(
    pose: Pose, points: np.ndarray, measured: np.ndarray, info: np.ndarray, K: Intrinsics, delta: float
) -> float:
    e, z = reprojection_residuals(pose, points, measured, K)
    if np.any(z <= Z_MIN):
        return math.inf
    cost, _ = huber(info * np.sum(e * e, axis=1), delta)
    return float(np.sum(cost))


def _lm_pose(
    pose: Pose,
    points: np.ndarray,
    measured: np.ndarray,
    info: np.ndarray,
    K: Intrinsics,
    cfg: LMConfig,
) -> tuple[Pose, list[float]]:
    cost = _robust_pose_cost(pose, points, measured, info, K, cfg.huber_delta)
    if math.isnan(cost):
        raise Diverged("motion-only BA cost is NaN at the initial pose")
    costs = [cost]
    if cost == 0.0 or not math.isfinite(cost):
        return pose, costs
    mu = cfg.initial_damping
    for _ in range(cfg.max_iterations):
        e, _ = reprojection_residuals(pose, points, measured, K)
        r2 = info * np.sum(e * e, axis=1)
        _, w = huber(r2, cfg.huber_delta)
        J, _ = reprojection_jacobians(pose, points, K)
        wi = (w * info)[:, None, None]
        H = np.sum(np.transpose(J, (0, 2, 1)) @ (wi * J), axis=0)
        g = np.einsum("nij,ni->j", wi * J, e)
        improved = False
        while mu < 1e12:
            try:
                step = np.linalg.solve(H + mu * np.eye(6), -g)
            except np.linalg.LinAlgError:
                mu *= cfg.damping_up
                continue
            candidate = pose.retract(step)
            new_cost = _robust_pose_cost(candidate, points, measured, info, K, cfg.huber_delta)
            if math.isnan(new_cost):
                raise Diverged("motion-only BA cost became NaN")
            if new_cost < cost:
                pose, improved = candidate, True
                mu *= cfg.damping_down
                break
            mu *= cfg.damping_up
        if not improved:
            break
        rel = (cost - new_cost) / cost
        cost = new_cost
        costs.append(cost)
        if cost == 0.0 or rel < cfg.convergence_tol:
            break
    return pose, costs


def motion_only_ba(
    points: np.ndarray,
    measured: np.ndarray,
    init: Pose,
    K: Intrinsics,
    cfg: LMConfig | None = None,
    info: np.ndarray | None = None,
    trace: list[list[float]] | None = None,
) -> tuple[Pose, np.ndarray]:
    """Refine a camera pose against fixed 3D points.

    Returns the pose and a mask of matches whose final χ² is within δ².
    ``trace`` (when given) receives the accepted-step costs of every round.
    """
    cfg = cfg or LMConfig()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    meas = np.asarray(measured, dtype=np.float64).reshape(-1, 2)
    if len(pts) < MIN_TRACKING_MATCHES:
        raise TooFewMatches(f"motion-only BA needs >= {MIN_TRACKING_MATCHES} matches (got {len(pts)})")
    w_info = np.ones(len(pts)) if info is None else np.asarray(info, dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(meas))):
        raise Diverged("non-finite input to motion-only BA")

    chi2_max = cfg.huber_delta**2
    pose = init
    e, z = reprojection_residuals(pose, pts, meas, K)
    active = z > Z_MIN
    for _ in range(cfg.rounds):
        if active.sum() < 3:
            break
        pose, costs = _lm_pose(pose, pts[active], meas[active], w_info[active], K, cfg)
        if trace is not None:
            trace.append(costs)
        e, z = reprojection_residuals(pose, pts, meas, K)
        chi2 = w_info * np.sum(e * e, axis=1)
        new_active = (chi2 <= chi2_max) & (z > Z_MIN)
        if np.array_equal(new_active, active):
            break
        active = new_active
    if not np.all(np.isfinite(pose.translation)):
        raise Diverged("motion-only BA produced a non-finite pose")
    e, z = reprojection_residuals(pose, pts, meas, K)
    inliers = (w_info * np.sum(e * e, axis=1) <= chi2_max) & (z > Z_MIN)
    return pose, inliers


# ---------------------------------------------------------------------------
# Local bundle adjustment
# ---------------------------------------------------------------------------


def _local_window(hmap: HyperMap, anchor_kf: int) -> tuple[list[int], list[int], list[int]]:
    with hmap.keyframes_lock.read():
        if anchor_kf not in hmap.keyframes:
            raise KeyError(f"unknown keyframe {anchor_kf}")
        local = [anchor_kf] + hmap.covisible_keyframes(anchor_kf)
        point_ids = sorted({
            pid for kf in local for pid in hmap.keyframes[kf].observations.values()
        })
    local_set = set(local)
    fixed: set[int] = set()
    for pid in point_ids:
        fixed.update(kf for kf in hmap.observers(pid) if kf not in local_set)
    return sorted(local), point_ids, sorted(fixed)


def _collect_factors(
    hmap: HyperMap, keyframe_ids: list[int], point_ids: set[int], scale_factor: float
) -> list[ReprojectionFactor]:
    factors = []
    with hmap.keyframes_lock.read():
        for kf_id in keyframe_ids:
            kf = hmap.keyframes[kf_id]
            for kp_idx, pid in sorted(kf.observations.items()):
                if pid not in point_ids:
                    continue
                u, v, octave = kf.keypoints[kp_idx]
                factors.append(ReprojectionFactor(
                    kf_id, kp_idx, pid, np.array([u, v]), info_weight(octave, scale_factor)
                ))
    return factors


class _LocalProblem:
    """Flattened variables and factors of one local BA solve."""

    def __init__(
        self,
        factors: list[ReprojectionFactor],
        poses: dict[int, Pose],
        points: dict[int, np.ndarray],
        free_kfs: list[int],
        K: dict[int, Intrinsics],
        delta: float,
    ) -> None:
        self.factors = factors
        self.free_kfs = free_kfs
        self.pose_slot = {kf: i for i, kf in enumerate(free_kfs)}
        self.point_ids = sorted(points)
        self.point_slot = {pid: i for i, pid in enumerate(self.point_ids)}
        self.K = K
        self.delta = delta
        self.f_kf = np.array([f.keyframe_id for f in factors])
        self.f_pt = np.array([self.point_slot[f.primitive_id] for f in factors])
        self.f_meas = np.array([f.measured for f in factors]).reshape(-1, 2)
        self.f_info = np.array([f.info_weight for f in factors])
        self.poses = dict(poses)
        self.points = np.array([points[pid] for pid in self.point_ids]).reshape(-1, 3)

    def residuals(self, poses: dict[int, Pose], points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e = np.zeros((len(self.factors), 2))
        z = np.zeros(len(self.factors))
        for kf in np.unique(self.f_kf):
            sel = np.flatnonzero(self.f_kf == kf)
            e[sel], z[sel] = reprojection_residuals(
                poses[kf], points[self.f_pt[sel]], self.f_meas[sel], self.K[kf]
            )
        return e, z

    def cost(self, poses: dict[int, Pose], points: np.ndarray) -> float:
        e, z = self.residuals(poses, points)
        if np.any(z <= Z_MIN):
            return math.inf
        c, _ = huber(self.f_info * np.sum(e * e, axis=1), self.delta)
        return float(np.sum(c))

    def normal_equations(self):
        n_p, n_l = len(self.free_kfs), len(self.point_ids)
        Hpp = np.zeros((6 * n_p, 6 * n_p))
        Hpl = np.zeros((6 * n_p, 3 * n_l))
        Hll = np.zeros((n_l, 3, 3))
        gp = np.zeros(6 * n_p)
        gl = np.zeros((n_l, 3))
        e, _ = self.residuals(self.poses, self.points)
        _, w = huber(self.f_info * np.sum(e * e, axis=1), self.delta)
        wi = w * self.f_info
        for kf in np.unique(self.f_kf):
            sel = np.flatnonzero(self.f_kf == kf)
            pts = self.f_pt[sel]
            Jx, Jl = reprojection_jacobians(self.poses[kf], self.points[pts], self.K[kf])
            wJl = wi[sel][:, None, None] * Jl
            np.add.at(Hll, pts, np.einsum("nji,njk->nik", wJl, Jl))
            np.add.at(gl, pts, np.einsum("nji,nj->ni", wJl, e[sel]))
            slot = self.pose_slot.get(int(kf))
            if slot is None:
                continue
            wJx = wi[sel][:, None, None] * Jx
            ps = slice(6 * slot, 6 * slot + 6)
            Hpp[ps, ps] += np.einsum("nji,njk->ik", wJx, Jx)
            gp[ps] += np.einsum("nji,nj->i", wJx, e[sel])
            cross = np.zeros((n_l, 6, 3))
            np.add.at(cross, pts, np.einsum("nji,njk->nik", wJx, Jl))
            Hpl[ps] += np.transpose(cross, (1, 0, 2)).reshape(6, 3 * n_l)
        return Hpp, Hpl, Hll, gp, gl

    def solve(self, Hpp, Hpl, Hll, gp, gl, mu: float) -> tuple[np.ndarray, np.ndarray]:
        """Damped step with point blocks eliminated (Schur complement)."""
        n_l = len(self.point_ids)
        Hll_inv = np.linalg.inv(Hll + mu * np.eye(3)[None, :, :])
        if len(gp) == 0:
            return gp, -np.einsum("nij,nj->ni", Hll_inv, gl)
        W = np.einsum("pnj,njk->pnk", Hpl.reshape(-1, n_l, 3), Hll_inv).reshape(len(gp), 3 * n_l)
        S = Hpp + mu * np.eye(len(gp)) - W @ Hpl.T
        rhs = -gp + W @ gl.reshape(-1)
        dp = np.linalg.solve(S, rhs)
        dl = -np.einsum("nij,nj->ni", Hll_inv, gl + (Hpl.T @ dp).reshape(n_l, 3))
        return dp, dl

    def apply(self, dp: np.ndarray, dl: np.ndarray) -> tuple[dict[int, Pose], np.ndarray]:
        poses = dict(self.poses)
        for kf, slot in self.pose_slot.items():
            poses[kf] = self.poses[kf].retract(dp[6 * slot:6 * slot + 6])
        return poses, self.points + dl


def local_ba(
    hmap: HyperMap,
    anchor_kf: int,
    cfg: LMConfig | None = None,
    scale_factor: float = DEFAULT_SCALE_FACTOR,
    cull_outliers: bool = True,
) -> LocalBAResult:
    """Jointly refine the anchor's covisibility window and its primitives.

    Keyframes outside the window that observe window primitives, and the
    first keyframe of the map, keep their poses.  Observations whose final
    χ² exceeds δ² are dropped from the map when ``cull_outliers`` is set.
    """
    cfg = cfg or LMConfig()
    local, point_ids, border = _local_window(hmap, anchor_kf)
    if not point_ids:
        raise EmptyLocalWindow(f"keyframe {anchor_kf} has no observed primitives in its window")
    first = hmap.first_keyframe_id()
    free = [kf for kf in local if kf != first]
    fixed = sorted(set(border) | ({first} & set(local)))

    with hmap.keyframes_lock.read():
        all_kfs = sorted(set(local) | set(border))
        poses = {kf: hmap.keyframes[kf].pose for kf in all_kfs}
        intr = {kf: hmap.keyframes[kf].intrinsics for kf in all_kfs}
    with hmap.primitives_lock.read():
        points = {pid: hmap.primitives[pid].position.copy() for pid in point_ids}
    factors = _collect_factors(hmap, all_kfs, set(point_ids), scale_factor)

    problem = _LocalProblem(factors, poses, points, free, intr, cfg.huber_delta)
    _, z = problem.residuals(problem.poses, problem.points)
    if np.any(z <= Z_MIN):
        keep = [f for f, depth in zip(factors, z) if depth > Z_MIN]
        problem = _LocalProblem(keep, poses, points, free, intr, cfg.huber_delta)
    cost = problem.cost(problem.poses, problem.points) if problem.factors else 0.0
    if math.isnan(cost):
        raise Diverged("local BA cost is NaN at initialization")
    costs = [cost]

    mu = cfg.initial_damping
    for _ in range(cfg.max_iterations * cfg.rounds):
        if cost == 0.0 or not problem.factors:
            break
        Hpp, Hpl, Hll, gp, gl = problem.normal_equations()
        improved = False
        while mu < 1e12:
            try:
                dp, dl = problem.solve(Hpp, Hpl, Hll, gp, gl, mu)
            except np.linalg.LinAlgError:
                mu *= cfg.damping_up
                continue
            cand_poses, cand_points = problem.apply(dp, dl)
            new_cost = problem.cost(cand_poses, cand_points)
            if math.isnan(new_cost):
                raise Diverged("local BA cost became NaN")
            if new_cost < cost:
                problem.poses, problem.points = cand_poses, cand_points
                mu *= cfg.damping_down
                improved = True
                break
            mu *= cfg.damping_up
        if not improved:
            break
        rel = (cost - new_cost) / cost
        cost = new_cost
        costs.append(cost)
        if rel < cfg.convergence_tol:
            break

    new_poses = {kf: problem.poses[kf] for kf in free}
    new_points = {pid: problem.points[problem.point_slot[pid]] for pid in problem.point_ids}
    with hmap.keyframes_lock.write(), hmap.primitives_lock.write():
        for kf, pose in new_poses.items():
            hmap.keyframes[kf].pose = pose
        for pid, pos in new_points.items():
            if pid in hmap.primitives:
                hmap.primitives[pid].position = pos.copy()

    removed = 0
    if cull_outliers and problem.factors:
        e, z = problem.residuals(problem.poses, problem.points)
        chi2 = problem.f_info * np.sum(e * e, axis=1)
        for f, c, depth in zip(problem.factors, chi2, z):
            if c > cfg.huber_delta**2 or depth <= Z_MIN:
                hmap.remove_observation(f.keyframe_id, f.keypoint_index)
                removed += 1
    return LocalBAResult(new_poses, new_points, fixed, costs, removed)


# ---------------------------------------------------------------------------
# Keyframe policy
# ---------------------------------------------------------------------------


def select_keyframe(stats: FrameStats, policy: KeyframePolicy | None = None) -> bool:
    """True when tracking is weak, has decayed against the reference, or is stale."""
    policy = policy or KeyframePolicy()
    return (
        stats.n_inliers < policy.k_min
        or stats.n_inliers < policy.r_ref * stats.reference_inliers
        or stats.frames_since_keyframe >= policy.f_max
    )


# ---------------------------------------------------------------------------
# Map-point creation
# ---------------------------------------------------------------------------


def _focal(K: Intrinsics) -> float:
    return 0.5 * (K.fx + K.fy)


def _create_from_depth(kf: Keyframe, hmap: HyperMap) -> list[int]:
    if kf.depth is None:
        return []
    created = []
    h, w = kf.depth.shape
    for kp_idx in kf.inactive_keypoints():
        u, v = kf.keypoints[kp_idx, :2]
        d = float(kf.depth[int(np.clip(round(v), 0, h - 1)), int(np.clip(round(u), 0, w - 1))])
        if not (math.isfinite(d) and d > 0):
            continue
        position = backproject(float(u), float(v), d, kf.pose, kf.intrinsics)
        prim = make_primitive(
            position, d, _focal(kf.intrinsics), sample_color(kf.image, u, v),
            descriptor=kf.descriptors[kp_idx],
        )
        pid = hmap.add_primitive(prim)
        hmap.add_observation(kf.id, int(kp_idx), pid)
        created.append(pid)
    return created


def _triangulation_neighbors(kf: Keyframe, hmap: HyperMap) -> list[int]:
    neighbors = hmap.covisible_keyframes(kf.id, min_shared=1)[:_MAX_TRIANGULATION_NEIGHBORS]
    if neighbors:
        return neighbors
    with hmap.keyframes_lock.read():
        earlier = sorted(k for k in hmap.keyframes if k < kf.id)
    return earlier[-1:]


def _create_by_triangulation(kf: Keyframe, hmap: HyperMap) -> list[int]:
    created = []
    used = set(kf.observations)
    for other_id in _triangulation_neighbors(kf, hmap):
        with hmap.keyframes_lock.read():
            other = hmap.keyframes[other_id]
        mine = np.array([i for i in kf.inactive_keypoints() if i not in used], dtype=np.int64)
        theirs = other.inactive_keypoints()
        if len(mine) == 0 or len(theirs) == 0:
            continue
        for a, b in match_descriptors(kf.descriptors[mine], other.descriptors[theirs]):
            i, j = int(mine[a]), int(theirs[b])
            try:
                point = triangulate(
                    tuple(kf.keypoints[i, :2]), kf.pose,
                    tuple(other.keypoints[j, :2]), other.pose, kf.intrinsics,
                )
            except (DegenerateParallax, CheiralityViolation, HighReprojectionError):
                continue
            depth = float(kf.pose.transform(point)[2])
            prim = make_primitive(
                point, depth, _focal(kf.intrinsics), sample_color(kf.image, *kf.keypoints[i, :2]),
                descriptor=kf.descriptors[i],
            )
            pid = hmap.add_primitive(prim)
            hmap.add_observation(kf.id, i, pid)
            hmap.add_observation(other_id, j, pid)
            used.add(i)
            created.append(pid)
    return created


def create_map_points(new_kf: Keyframe, hmap: HyperMap, mode: str = "rgbd") -> list[int]:
    """Primitives for the new keyframe's unmatched keypoints.

    ``rgbd`` back-projects measured depth; ``mono`` triangulates descriptor
    matches against covisible keyframes.  Each primitive carries the
    keypoint's descriptor and is observed by the keyframes it came from.
    """
    if mode == "rgbd":
        return _create_from_depth(new_kf, hmap)
    if mode == "mono":
        return _create_by_triangulation(new_kf, hmap)
    raise ValueError(f"mode must be 'mono' or 'rgbd' (got {mode!r})")


# ---------------------------------------------------------------------------
# Monocular bootstrap
# ---------------------------------------------------------------------------


def initialize_monocular(
    kp_ref: np.ndarray,
    desc_ref: np.ndarray,
    kp_cur: np.ndarray,
    desc_cur: np.ndarray,
    K: Intrinsics,
    min_points: int = BOOTSTRAP_MIN_POINTS,
    min_parallax_deg: float = BOOTSTRAP_MIN_PARALLAX_DEG,
    verbose: bool = False,
) -> MonocularInit | None:
    """Two-view map from an essential matrix, or None when the pair is too weak.

    The map is scaled so the median depth in the reference view is 1.
    """
    pairs = match_descriptors(desc_ref, desc_cur)
    if len(pairs) < min_points:
        _log(f"bootstrap: {len(pairs)} matches < {min_points}", verbose)
        return None
    pts_ref = np.array([kp_ref[i, :2] for i, _ in pairs], dtype=np.float64)
    pts_cur = np.array([kp_cur[j, :2] for _, j in pairs], dtype=np.float64)
    E, mask = cv2.findEssentialMat(pts_ref, pts_cur, K.K, method=cv2.RANSAC, prob=0.999, threshold=1.0)
    if E is None or E.shape != (3, 3):
        return None
    _, R, t, mask = cv2.recoverPose(E, pts_ref, pts_cur, K.K, mask=mask)
    pose = Pose.from_rt(R, t.reshape(3))
    identity = Pose.identity()

    points, kept, parallax = [], [], []
    for row, ((i, j), ok) in enumerate(zip(pairs, mask.reshape(-1))):
        if not ok:
            continue
        try:
            p = triangulate(
                tuple(pts_ref[row]), identity, tuple(pts_cur[row]), pose, K, min_parallax_deg=0.0
            )
        except (DegenerateParallax, CheiralityViolation, HighReprojectionError):
            continue
        ray_a = p / np.linalg.norm(p)
        ray_b = p - pose.camera_center()
        ray_b /= np.linalg.norm(ray_b)
        parallax.append(math.degrees(math.acos(float(np.clip(ray_a @ ray_b, -1.0, 1.0)))))
        points.append(p)
        kept.append((i, j))
    if len(points) < min_points:
        _log(f"bootstrap: {len(points)} triangulated points < {min_points}", verbose)
        return None
    median_parallax = float(np.median(parallax))
    if median_parallax < min_parallax_deg:
        _log(f"bootstrap: median parallax {median_parallax:.2f} deg < {min_parallax_deg}", verbose)
        return None
    pts = np.array(points)
    scale = 1.0 / float(np.median(pts[:, 2]))
    return MonocularInit(
        pose=Pose(pose.rotation, pose.translation * scale),
        points=pts * scale,
        pairs=kept,
        median_parallax_deg=median_parallax,
    )


# ---------------------------------------------------------------------------
# Data association
# ---------------------------------------------------------------------------


def search_by_projection(
    points: np.ndarray,
    point_descriptors: np.ndarray,
    pose: Pose,
    K: Intrinsics,
    keypoints: np.ndarray,
    descriptors: np.ndarray,
    radius_px: float = _SEARCH_RADIUS_PX,
    max_hamming: int = 50,
) -> list[tuple[int, int]]:
    """(point index, keypoint index) pairs found around each projected point.

    A keypoint goes to the point with the smallest Hamming distance; ties keep
    the lower point index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or len(keypoints) == 0:
        return []
    p_cam = pose.transform(pts)
    front = p_cam[:, 2] > Z_MIN
    zs = np.where(front, p_cam[:, 2], 1.0)
    uv = np.stack([K.fx * p_cam[:, 0] / zs + K.cx, K.fy * p_cam[:, 1] / zs + K.cy], axis=1)
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)

    tree = cKDTree(np.asarray(keypoints, dtype=np.float64)[:, :2])
    best: dict[int, tuple[int, int]] = {}
    for pi in np.flatnonzero(inside):
        near = tree.query_ball_point(uv[pi], radius_px)
        if not near:
            continue
        near = np.asarray(sorted(near), dtype=np.int64)
        d = hamming_matrix(point_descriptors[pi], descriptors[near])[0]
        k = int(np.argmin(d))
        if d[k] > max_hamming:
            continue
        kp = int(near[k])
        if kp not in best or d[k] < best[kp][0]:
            best[kp] = (int(d[k]), int(pi))
    return sorted((pi, kp) for kp, (_, pi) in best.items())


def _log(msg: str, verbose: bool) -> None:
    if verbose:
        print(f"[localization] {msg}", file=sys.stderr)
