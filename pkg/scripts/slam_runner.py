#!/usr/bin/env python3
"""SLAM Runner — localization, geometry mapping, photorealistic mapping and loop
closing over one image sequence.

Per frame (``threads == 1``, the reference interleaving):
  1. extract features; predict the pose with a constant-velocity model;
  2. match the local map by projection (descriptor matching as fallback) and
     refine the pose with motion-only BA;
  3. on a keyframe decision: insert the keyframe, create map points, add
     temporary primitives by geometry densification, run local BA and check
     for a loop;
  4. run ``optimizer_iters_per_frame`` photorealistic iterations.
After the last frame ``final_iters`` more iterations refine the map, then
keyframe renders are evaluated.

With ``threads > 1`` local mapping, loop closing and photorealistic
optimization run on three worker threads while tracking stays on the
caller's thread.  One mapping mutex serialises the writers (map-point
creation, local BA, loop correction, optimizer steps); tracking only reads.

Frame poses are stored relative to their reference keyframe, so local BA and
loop corrections also move the reported trajectory.

Monocular runs bootstrap from an essential matrix between a reference frame
and a later one; the map scale is arbitrary and ATE uses Sim(3) alignment.
RGB-D runs align with SE(3).

``train_offline`` is the offline splatting baseline: fixed ground-truth poses,
a map initialised from a map.hpm file or from random points.
"""

from __future__ import annotations

import queue
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from dataset_loaders import SequenceFrame
from evaluation import RenderMetrics, compute_ate, compute_psnr, evaluate_renders
from feature_extractor import extract_features, keypoints_to_array, match_descriptors
from hyper_core import (
    DESCRIPTOR_BYTES,
    HyperMap,
    Intrinsics,
    Keyframe,
    Pose,
    TooFewPairs,
    associate_timestamps,
    make_primitive,
    sample_color,
    umeyama,
)
from localization import (
    MIN_TRACKING_MATCHES,
    Diverged,
    EmptyLocalWindow,
    FrameStats,
    KeyframePolicy,
    LMConfig,
    MonocularInit,
    TooFewMatches,
    create_map_points,
    info_weight,
    initialize_monocular,
    local_ba,
    motion_only_ba,
    search_by_projection,
    select_keyframe,
)
from loop_closing import LoopParams, apply_correction, detect_loop
from map_io import hpm_size, read_map
from photomap import PhotoMapper, TrainSchedule, geometry_densify, ssim
from slam_config import ConfigError, SlamConfig, spawn_generators
from splat_rasterizer import RasterSettings, render

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

LOCAL_WINDOW_KEYFRAMES: int = 10
OFFLINE_RANDOM_POINTS: int = 100
_RNG_CONSUMERS: tuple[str, ...] = ("photomap", "loop", "offline")
_PHOTO_IDLE_S: float = 0.005


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class TrackingLost(RuntimeError):
    """Raised when tracking stays below its inlier floor for too many frames.

    ``report`` holds the partial run (``tracking_lost`` is true) and
    ``system`` the map built so far, so callers can still write outputs.
    """

    def __init__(self, message: str, report: RunReport, system: SlamSystem | None = None) -> None:
        super().__init__(message)
        self.report = report
        self.system = system


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    ate_rmse: float | None = None
    ate_std: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    lpips: float | None = None
    held_out_psnr: float | None = None
    held_out_ssim: float | None = None
    tracking_fps: float = 0.0
    rendering_fps: float = 0.0
    model_size_bytes: int = 0
    n_primitives: int = 0
    n_temporary: int = 0
    n_keyframes: int = 0
    n_frames: int = 0
    loop_closures: int = 0
    tracking_lost: bool = False
    trajectory: list[tuple[float, Pose]] = field(default_factory=list, repr=False)
    renders: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    TIMING_FIELDS = ("tracking_fps", "rendering_fps")

    def to_dict(self, include_timing: bool = True) -> dict:
        data = asdict(self)
        data.pop("trajectory")
        data.pop("renders")
        if not include_timing:
            for key in self.TIMING_FIELDS:
                data.pop(key)
        return data


@dataclass
class _TrackedFrame:
    timestamp: float
    reference_kf: int
    relative: Pose          # frame pose ∘ reference pose⁻¹


@dataclass
class _MonoReference:
    timestamp: float
    index: int
    image: np.ndarray
    keypoints: np.ndarray
    descriptors: np.ndarray
    pose: Pose


# ---------------------------------------------------------------------------
# Builders from the flat config
# ---------------------------------------------------------------------------


def build_lm_config(cfg: SlamConfig) -> LMConfig:
    return LMConfig(
        max_iterations=cfg.lm_max_iterations,
        initial_damping=cfg.lm_initial_damping,
        huber_delta=cfg.huber_delta,
        rounds=cfg.lm_rounds,
    )


def build_schedule(cfg: SlamConfig) -> TrainSchedule:
    return TrainSchedule(
        n=cfg.gp_levels,
        total_iters_per_keyframe=cfg.iters_per_keyframe,
        lambda_dssim=cfg.lambda_dssim,
        lr_position=cfg.lr_position,
        lr_sh_dc=cfg.lr_sh_dc,
        lr_sh_rest=cfg.lr_sh_rest,
        lr_opacity=cfg.lr_opacity,
        lr_scale=cfg.lr_scale,
        lr_rotation=cfg.lr_rotation,
        optimizer=cfg.optimizer,
        densify_interval=cfg.densify_interval,
        densify_grad_threshold=cfg.densify_grad_threshold,
        opacity_prune_threshold=cfg.opacity_prune_threshold,
        max_primitives=cfg.max_primitives,
        freeze_tracked_positions=cfg.freeze_tracked_positions,
    )


def build_raster(cfg: SlamConfig) -> RasterSettings:
    return RasterSettings(tile_size=cfg.tile_size, sh_degree=cfg.sh_degree, workers=cfg.render_workers)


def build_loop_params(cfg: SlamConfig) -> LoopParams:
    return LoopParams(
        gap_min=cfg.loop_gap_min,
        score_min=cfg.loop_score_min,
        max_hamming=cfg.max_hamming,
        tau=cfg.sim3_tau,
        inlier_min=cfg.sim3_inlier_min,
        ransac_iterations=cfg.sim3_ransac_iterations,
        with_scale=cfg.mode == "mono",
    )


def build_policy(cfg: SlamConfig) -> KeyframePolicy:
    return KeyframePolicy(k_min=cfg.kf_min_inliers, r_ref=cfg.kf_ref_ratio, f_max=cfg.kf_max_gap)


# ---------------------------------------------------------------------------
# SLAM system
# ---------------------------------------------------------------------------


class SlamSystem:
    """Owns the map, the tracker state and the photorealistic optimizer."""

    def __init__(self, cfg: SlamConfig, K: Intrinsics) -> None:
        self.cfg = cfg
        self.K = K
        self.mode = cfg.mode
        self.hmap = HyperMap(cfg.covisibility_min_shared)
        self.rngs = spawn_generators(cfg.seed, _RNG_CONSUMERS)
        self.lm_cfg = build_lm_config(cfg)
        self.policy = build_policy(cfg)
        self.loop_params = build_loop_params(cfg)
        self.raster = build_raster(cfg)
        self.mapper = PhotoMapper(build_schedule(cfg), self.raster, seed=cfg.seed, verbose=cfg.verbose)
        self.mapper.rng = self.rngs["photomap"]
        self.mapping_mutex = threading.Lock()

        self.frames: list[_TrackedFrame] = []
        self.reference_kf: int | None = None
        self.velocity: Pose | None = None
        self.frames_since_keyframe = 0
        self.lost_count = 0
        self.loop_closures = 0
        self.tracking_time = 0.0
        self.tracked_frames = 0
        self._mono_ref: _MonoReference | None = None

    def _log(self, msg: str) -> None:
        if self.cfg.verbose:
            print(f"[slam_runner] {msg}", file=sys.stderr)

    # -- trajectory ----------------------------------------------------------

    def frame_pose(self, tracked: _TrackedFrame) -> Pose:
        with self.hmap.keyframes_lock.read():
            ref_pose = self.hmap.keyframes[tracked.reference_kf].pose
        return tracked.relative.compose(ref_pose)

    def trajectory(self) -> list[tuple[float, Pose]]:
        return [(f.timestamp, self.frame_pose(f)) for f in self.frames]

    def _record(self, timestamp: float, pose: Pose, reference_kf: int) -> None:
        with self.hmap.keyframes_lock.read():
            ref_pose = self.hmap.keyframes[reference_kf].pose
        self.frames.append(_TrackedFrame(timestamp, reference_kf, pose.compose(ref_pose.inverse())))

    # -- keyframes -----------------------------------------------------------

    def _new_keyframe(
        self,
        timestamp: float,
        pose: Pose,
        image: np.ndarray,
        depth: np.ndarray | None,
        keypoints: np.ndarray,
        descriptors: np.ndarray,
        observations: dict[int, int] | None = None,
    ) -> int:
        kf = Keyframe(
            id=-1, timestamp=timestamp, pose=pose, intrinsics=self.K, image=image, depth=depth,
            keypoints=keypoints, descriptors=descriptors,
        )
        with self.mapping_mutex:
            kf_id = self.hmap.add_keyframe(kf)
            with self.hmap.primitives_lock.read():
                live = {kp: pid for kp, pid in (observations or {}).items() if pid in self.hmap.primitives}
            for kp_idx, pid in live.items():
                self.hmap.add_observation(kf_id, kp_idx, pid)
        self.reference_kf = kf_id
        self.frames_since_keyframe = 0
        return kf_id

    def map_keyframe(self, kf_id: int) -> None:
        """Map points, temporary primitives and local BA for a new keyframe."""
        with self.mapping_mutex:
            with self.hmap.keyframes_lock.read():
                kf = self.hmap.keyframes[kf_id]
            created = create_map_points(kf, self.hmap, self.mode)
            temporary = []
            if self.cfg.geometry_densify:
                temporary = geometry_densify(
                    kf, self.hmap, self.mode, self.cfg.geo_neighbors, self.cfg.geo_radius_px
                )
            if self.cfg.local_ba and len(self.hmap.keyframes) > 1:
                try:
                    result = local_ba(self.hmap, kf_id, self.lm_cfg, self.cfg.scale_factor)
                    if result.removed_observations:
                        self._log(f"keyframe {kf_id}: local BA culled {result.removed_observations} observations")
                except (EmptyLocalWindow, Diverged) as exc:
                    self._log(f"keyframe {kf_id}: local BA skipped ({exc})")
        self._log(
            f"keyframe {kf_id}: {len(created)} map points, {len(temporary)} temporary, "
            f"{len(self.hmap.primitives)} primitives"
        )

    def check_loop(self, kf_id: int) -> bool:
        if not self.cfg.loop_closure:
            return False
        with self.hmap.keyframes_lock.read():
            kf = self.hmap.keyframes.get(kf_id)
        if kf is None:
            return False
        candidate = detect_loop(kf, self.hmap, self.loop_params, self.rngs["loop"], self.cfg.verbose)
        if candidate is None:
            return False
        with self.mapping_mutex:
            window = apply_correction(self.hmap, candidate)
        self.loop_closures += 1
        self.velocity = None
        self._log(
            f"loop {candidate.query_kf} -> {candidate.match_kf}: {candidate.inliers} inliers, "
            f"scale {candidate.sim3.scale:.4f}, {len(window)} keyframes corrected"
        )
        return True

    def optimize(self, iterations: int) -> None:
        for _ in range(iterations):
            with self.mapping_mutex:
                if self.mapper.step(self.hmap) is None:
                    return

    # -- tracking ------------------------------------------------------------

    def _local_map(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(primitive ids, positions, descriptors) observed by the reference window."""
        with self.hmap.keyframes_lock.read():
            window = [self.reference_kf] + self.hmap.covisible_keyframes(
                self.reference_kf, min_shared=1
            )[:LOCAL_WINDOW_KEYFRAMES]
            pids = sorted({pid for k in window for pid in self.hmap.keyframes[k].observations.values()})
        with self.hmap.primitives_lock.read():
            prims = [(pid, self.hmap.primitives.get(pid)) for pid in pids]
            prims = [(pid, p) for pid, p in prims if p is not None and p.descriptor is not None]
            ids = np.array([pid for pid, _ in prims], dtype=np.int64)
            positions = np.array([p.position for _, p in prims]).reshape(-1, 3)
            descriptors = np.array([p.descriptor for _, p in prims], dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        return ids, positions, descriptors

    def _track(
        self, keypoints: np.ndarray, descriptors: np.ndarray
    ) -> tuple[Pose, dict[int, int], int]:
        """Pose, inlier observations (keypoint → primitive) and the inlier count."""
        last = self.frame_pose(self.frames[-1])
        predicted = last if self.velocity is None else self.velocity.compose(last)
        ids, positions, point_desc = self._local_map()
        matches = search_by_projection(
            positions, point_desc, predicted, self.K, keypoints, descriptors,
            self.cfg.search_radius_px, self.cfg.max_hamming,
        )
        if len(matches) < self.cfg.tracking_min_inliers:
            matches = match_descriptors(point_desc, descriptors, self.cfg.max_hamming, self.cfg.match_ratio)
        if len(matches) < MIN_TRACKING_MATCHES:
            raise TooFewMatches(f"{len(matches)} matches against {len(ids)} local primitives")
        pi = np.array([m[0] for m in matches], dtype=np.int64)
        ki = np.array([m[1] for m in matches], dtype=np.int64)
        weights = np.array([info_weight(o, self.cfg.scale_factor) for o in keypoints[ki, 2]])
        pose, inliers = motion_only_ba(
            positions[pi], keypoints[ki, :2], predicted, self.K, self.lm_cfg, info=weights
        )
        observations = {int(k): int(ids[p]) for p, k, ok in zip(pi, ki, inliers) if ok}
        return pose, observations, int(inliers.sum())

    def _bootstrap_mono(
        self, frame: SequenceFrame, index: int, image: np.ndarray, keypoints: np.ndarray, descriptors: np.ndarray
    ) -> int | None:
        ref = self._mono_ref
        if ref is None or index - ref.index > self.cfg.kf_max_gap:
            pose0 = frame.gt_pose if (self.cfg.seed_with_ground_truth and frame.gt_pose is not None) else Pose.identity()
            self._mono_ref = _MonoReference(frame.timestamp, index, image, keypoints, descriptors, pose0)
            return None
        init: MonocularInit | None = initialize_monocular(
            ref.keypoints, ref.descriptors, keypoints, descriptors, self.K,
            self.cfg.bootstrap_min_points, self.cfg.bootstrap_min_parallax_deg, self.cfg.verbose,
        )
        if init is None:
            return None
        pose0 = ref.pose
        pose1 = init.pose.compose(pose0)
        world = pose0.inverse().transform(init.points)
        kf0 = self._new_keyframe(ref.timestamp, pose0, ref.image, None, ref.keypoints, ref.descriptors)
        self._record(ref.timestamp, pose0, kf0)
        kf1 = self._new_keyframe(frame.timestamp, pose1, image, None, keypoints, descriptors)
        focal = 0.5 * (self.K.fx + self.K.fy)
        with self.mapping_mutex:
            for p, depth, (i, j) in zip(world, init.points[:, 2], init.pairs):
                prim = make_primitive(
                    p, float(depth), focal, sample_color(ref.image, *ref.keypoints[i, :2]),
                    descriptor=ref.descriptors[i],
                )
                pid = self.hmap.add_primitive(prim)
                self.hmap.add_observation(kf0, int(i), pid)
                self.hmap.add_observation(kf1, int(j), pid)
            if self.cfg.geometry_densify:
                with self.hmap.keyframes_lock.read():
                    first = self.hmap.keyframes[kf0]
                geometry_densify(first, self.hmap, self.mode, self.cfg.geo_neighbors, self.cfg.geo_radius_px)
        self._mono_ref = None
        self._log(
            f"monocular map from frames {ref.index} and {index}: {len(init.points)} points, "
            f"median parallax {init.median_parallax_deg:.2f} deg"
        )
        return kf1

    def process_frame(self, frame: SequenceFrame, index: int) -> int | None:
        """Track one frame; returns the id of a newly inserted keyframe or None.

        The new keyframe still has to go through ``map_keyframe`` and
        ``check_loop``.  Failed frames only bump ``lost_count``; the driver
        decides when tracking is lost.
        """
        t0 = time.perf_counter()
        image = frame.load_color()
        depth = frame.load_depth(self.K.depth_scale) if self.mode == "rgbd" else None
        kps, descriptors = extract_features(image, self.cfg.n_features, self.cfg.n_octaves, self.cfg.scale_factor)
        keypoints = keypoints_to_array(kps)

        new_kf = None
        try:
            if self.reference_kf is None:
                if self.mode == "rgbd":
                    seeded = self.cfg.seed_with_ground_truth and frame.gt_pose is not None
                    pose = frame.gt_pose if seeded else Pose.identity()
                    new_kf = self._new_keyframe(frame.timestamp, pose, image, depth, keypoints, descriptors)
                    self._record(frame.timestamp, pose, new_kf)
                else:
                    new_kf = self._bootstrap_mono(frame, index, image, keypoints, descriptors)
                    if new_kf is not None:
                        self._record(frame.timestamp, self.hmap.keyframes[new_kf].pose, new_kf)
                return new_kf

            last = self.frame_pose(self.frames[-1])
            try:
                pose, observations, n_inliers = self._track(keypoints, descriptors)
            except (TooFewMatches, Diverged) as exc:
                self._log(f"frame {index}: tracking failed ({exc})")
                pose, observations, n_inliers = last, {}, 0

            if n_inliers < self.cfg.tracking_min_inliers:
                self.lost_count += 1
                self._log(f"frame {index}: {n_inliers} inliers, lost for {self.lost_count} frame(s)")
                if self.velocity is not None:
                    pose = self.velocity.compose(last)
                self._record(frame.timestamp, pose, self.reference_kf)
                return None
            self.lost_count = 0
            self.velocity = pose.compose(last.inverse())
            self.frames_since_keyframe += 1

            with self.hmap.keyframes_lock.read():
                reference_inliers = len(self.hmap.keyframes[self.reference_kf].observations)
            stats = FrameStats(n_inliers, reference_inliers, self.frames_since_keyframe)
            if select_keyframe(stats, self.policy):
                new_kf = self._new_keyframe(
                    frame.timestamp, pose, image, depth, keypoints, descriptors, observations
                )
            self._record(frame.timestamp, pose, self.reference_kf)
            return new_kf
        finally:
            self.tracking_time += time.perf_counter() - t0
            self.tracked_frames += 1

    # -- evaluation ----------------------------------------------------------

    def _ate(self, trajectory: list[tuple[float, Pose]], gt: list[tuple[float, Pose]]) -> tuple[float | None, float | None]:
        align = "sim3" if self.mode == "mono" else "se3"
        try:
            return compute_ate(trajectory, gt, align, self.cfg.association_max_dt)
        except TooFewPairs:
            pairs = associate_timestamps(
                [t for t, _ in trajectory], [t for t, _ in gt], self.cfg.association_max_dt
            )
            if not pairs:
                return None, None
            # too few poses for a rotation: align the centroids only
            src = np.array([trajectory[i][1].camera_center() for i, _ in pairs])
            dst = np.array([gt[j][1].camera_center() for _, j in pairs])
            r = np.linalg.norm(src - src.mean(axis=0) - (dst - dst.mean(axis=0)), axis=1)
            return float(np.sqrt(np.mean(r**2))), float(np.std(r))

    def _held_out(
        self, frames: list[SequenceFrame], trajectory: list[tuple[float, Pose]], keyframe_stamps: set[float]
    ) -> tuple[float | None, float | None]:
        gt = [(f.timestamp, f.gt_pose) for f in frames if f.gt_pose is not None]
        pairs = associate_timestamps([t for t, _ in trajectory], [t for t, _ in gt], self.cfg.association_max_dt)
        if len(pairs) < 3:
            return None, None
        src = np.array([trajectory[i][1].camera_center() for i, _ in pairs])
        dst = np.array([gt[j][1].camera_center() for _, j in pairs])
        to_map = umeyama(dst, src, with_scale=self.mode == "mono")
        items = self.hmap.primitive_items()
        psnrs, ssims = [], []
        for frame in frames[:: self.cfg.eval_every]:
            if frame.gt_pose is None or frame.timestamp in keyframe_stamps:
                continue
            pose = to_map.correct_pose(frame.gt_pose)
            image = np.clip(render([p for _, p in items], pose, self.K, self.raster).image, 0.0, 1.0)
            gt_image = frame.load_color()
            psnrs.append(compute_psnr(image, gt_image))
            ssims.append(ssim(image, gt_image))
        if not psnrs:
            return None, None
        return float(np.mean(psnrs)), float(np.mean(ssims))

    def report(self, frames: list[SequenceFrame], tracking_lost: bool = False, evaluate: bool = True) -> RunReport:
        trajectory = self.trajectory()
        gt = [(f.timestamp, f.gt_pose) for f in frames if f.gt_pose is not None]
        ate_rmse, ate_std = self._ate(trajectory, gt) if gt and trajectory else (None, None)
        with self.hmap.keyframes_lock.read():
            keyframes = [self.hmap.keyframes[k] for k in sorted(self.hmap.keyframes)]
        metrics = (
            evaluate_renders(self.hmap, keyframes[:: self.cfg.eval_every], self.raster)
            if evaluate else RenderMetrics(None, None, 0.0, {})
        )
        held_psnr = held_ssim = None
        if evaluate and self.cfg.eval_held_out:
            held_psnr, held_ssim = self._held_out(frames, trajectory, {kf.timestamp for kf in keyframes})
        prims = [p for _, p in self.hmap.primitive_items()]
        return RunReport(
            ate_rmse=ate_rmse,
            ate_std=ate_std,
            psnr=metrics.psnr,
            ssim=metrics.ssim,
            held_out_psnr=held_psnr,
            held_out_ssim=held_ssim,
            tracking_fps=self.tracked_frames / self.tracking_time if self.tracking_time > 0 else 0.0,
            rendering_fps=metrics.rendering_fps,
            model_size_bytes=hpm_size(prims),
            n_primitives=len(prims),
            n_temporary=sum(p.temporary for p in prims),
            n_keyframes=len(keyframes),
            n_frames=len(frames),
            loop_closures=self.loop_closures,
            tracking_lost=tracking_lost,
            trajectory=trajectory,
            renders=metrics.renders,
        )

    def refine(self, iterations: int) -> None:
        if not self.hmap.keyframes or iterations <= 0:
            return
        for _ in tqdm(range(iterations), desc="refine", file=sys.stderr, disable=not self.cfg.verbose):
            self.mapper.step(self.hmap)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _check_mode(frames: list[SequenceFrame], cfg: SlamConfig) -> None:
    if not frames:
        raise ConfigError("empty sequence")
    if cfg.mode == "rgbd" and frames[0].depth_path is None and frames[0].depth is None:
        raise ConfigError("rgbd mode needs depth images; use mode=mono for colour-only sequences")


def _lost(system: SlamSystem, frames: list[SequenceFrame], index: int) -> TrackingLost:
    report = system.report(frames, tracking_lost=True)
    return TrackingLost(
        f"tracking lost at frame {index} after {system.lost_count} frames below "
        f"{system.cfg.tracking_min_inliers} inliers",
        report,
        system,
    )


def _run_deterministic(system: SlamSystem, frames: list[SequenceFrame]) -> None:
    cfg = system.cfg
    for index, frame in enumerate(frames):
        new_kf = system.process_frame(frame, index)
        if system.lost_count > cfg.tracking_lost_frames:
            raise _lost(system, frames, index)
        if new_kf is not None:
            system.map_keyframe(new_kf)
        system.optimize(cfg.optimizer_iters_per_frame)
        if new_kf is not None:
            system.check_loop(new_kf)


def _run_concurrent(system: SlamSystem, frames: list[SequenceFrame]) -> None:
    cfg = system.cfg
    mapping_q: queue.Queue[int | None] = queue.Queue()
    loop_q: queue.Queue[int | None] = queue.Queue()
    stop = threading.Event()

    def local_mapping() -> None:
        while (kf_id := mapping_q.get()) is not None:
            system.map_keyframe(kf_id)
            loop_q.put(kf_id)
        loop_q.put(None)

    def loop_closing() -> None:
        while (kf_id := loop_q.get()) is not None:
            system.check_loop(kf_id)

    def photorealistic_mapping() -> None:
        while not stop.is_set():
            if not system.hmap.keyframes:
                stop.wait(_PHOTO_IDLE_S)
                continue
            system.optimize(1)

    with ThreadPoolExecutor(max_workers=3, thread_name_prefix="hyperslam") as pool:
        futures = [pool.submit(local_mapping), pool.submit(loop_closing), pool.submit(photorealistic_mapping)]
        try:
            for index, frame in enumerate(frames):
                new_kf = system.process_frame(frame, index)
                if system.lost_count > cfg.tracking_lost_frames:
                    raise _lost(system, frames, index)
                if new_kf is not None:
                    mapping_q.put(new_kf)
        finally:
            mapping_q.put(None)
            futures[0].result()
            futures[1].result()
            stop.set()
            futures[2].result()


def run_slam(
    frames: list[SequenceFrame],
    cfg: SlamConfig,
    K: Intrinsics,
    evaluate: bool = True,
) -> tuple[RunReport, SlamSystem]:
    """Run the full system over ``frames`` and return the report and final state.

    Raises ``TrackingLost`` (carrying the partial report) when tracking fails
    for more than ``tracking_lost_frames`` consecutive frames.
    """
    if cfg.max_frames:
        frames = frames[: cfg.max_frames]
    _check_mode(frames, cfg)
    system = SlamSystem(cfg, K)
    if cfg.threads == 1:
        _run_deterministic(system, frames)
    else:
        _run_concurrent(system, frames)
    if system.reference_kf is None:
        raise TrackingLost(
            "no map could be initialised from the sequence", system.report(frames, True, evaluate), system
        )
    system.refine(cfg.final_iters)
    return system.report(frames, evaluate=evaluate), system


# ---------------------------------------------------------------------------
# Offline baseline
# ---------------------------------------------------------------------------


def _random_init(hmap: HyperMap, keyframes: list[Keyframe], n: int, rng: np.random.Generator) -> None:
    """``n`` primitives uniform in the box spanned by the camera centres."""
    centers = np.array([kf.pose.camera_center() for kf in keyframes])
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    pad = np.maximum(hi - lo, 1.0) * 0.1
    positions = rng.uniform(lo - pad, hi + pad, size=(n, 3))
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    K = keyframes[0].intrinsics
    focal = 0.5 * (K.fx + K.fy)
    for p, c in zip(positions, colors):
        dist = float(np.min(np.linalg.norm(centers - p, axis=1)))
        hmap.add_primitive(make_primitive(p, max(dist, 1e-3), focal, c))


def train_offline(
    frames: list[SequenceFrame],
    cfg: SlamConfig,
    K: Intrinsics,
    init_map: str | Path | None = None,
    n_random: int = OFFLINE_RANDOM_POINTS,
    iterations: int | None = None,
) -> tuple[RunReport, SlamSystem]:
    """Splatting with fixed ground-truth poses, initialised from a map or random points."""
    if cfg.max_frames:
        frames = frames[: cfg.max_frames]
    posed = [f for f in frames[:: cfg.kf_max_gap] if f.gt_pose is not None]
    if not posed:
        raise ConfigError("offline training needs ground-truth poses")
    system = SlamSystem(cfg, K)
    for frame in posed:
        kf_id = system._new_keyframe(
            frame.timestamp, frame.gt_pose, frame.load_color(), None,
            np.zeros((0, 3)), np.zeros((0, DESCRIPTOR_BYTES), np.uint8),
        )
        system._record(frame.timestamp, frame.gt_pose, kf_id)
    with system.hmap.keyframes_lock.read():
        keyframes = [system.hmap.keyframes[k] for k in sorted(system.hmap.keyframes)]
    if init_map is not None:
        for _, prim in read_map(init_map).primitive_items():
            prim.descriptor = None
            system.hmap.add_primitive(prim)
    else:
        _random_init(system.hmap, keyframes, n_random, system.rngs["offline"])
    system._log(f"offline training on {len(keyframes)} views, {len(system.hmap.primitives)} initial primitives")
    system.refine(cfg.final_iters if iterations is None else iterations)
    report = system.report([], evaluate=True)
    report.n_frames = len(frames)
    return report, system
