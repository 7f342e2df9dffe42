"""Tests for scripts/slam_runner.py.

Covers:
- config → component builders (LM, schedule, raster, loop, keyframe policy)
- RunReport serialisation with and without timing fields
- input gating: empty sequence, RGB-D without depth, monocular without a
  second view
- RGB-D run seeded with ground truth: static camera tracked exactly,
  deterministic across repeats, max_frames, concurrent workers
- sliding camera over a textured plane: trajectory within 1 mm of ground
  truth, concurrent mode within 1 mm of the sequential run
- gp_levels=0 trains every keyframe at full resolution only
- TrackingLost carries a partial report and the system
- offline baseline with random and map.hpm initialisation

The end-to-end runs use small in-memory frames so each finishes in seconds.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from dataset_loaders import SequenceFrame  # noqa: E402
from hyper_core import HyperMap, HyperPrimitive, Intrinsics, Pose  # noqa: E402
from map_io import HPM_HEADER_BYTES, HPM_RECORD_BYTES, write_map  # noqa: E402
from slam_config import ConfigError, SlamConfig  # noqa: E402
from slam_runner import (  # noqa: E402
    RunReport,
    TrackingLost,
    build_lm_config,
    build_loop_params,
    build_policy,
    build_raster,
    build_schedule,
    run_slam,
    train_offline,
)

K = Intrinsics(100.0, 100.0, 64.0, 48.0, 128, 96, depth_scale=5000.0)
GT_POSE = Pose(translation=np.array([0.1, -0.05, 0.0]))

FAST = dict(
    verbose=False,
    seed_with_ground_truth=True,
    n_features=300,
    n_octaves=3,
    tracking_min_inliers=10,
    tracking_lost_frames=1,
    kf_min_inliers=0,
    iters_per_keyframe=6,
    optimizer_iters_per_frame=2,
    final_iters=2,
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def block_texture(seed: int = 0) -> np.ndarray:
    blocks = np.random.default_rng(seed).integers(0, 2, size=(12, 16)).astype(np.float64)
    gray = 0.15 + 0.7 * np.kron(blocks, np.ones((8, 8)))
    return np.repeat(gray[..., None], 3, axis=2)


def static_frames(n: int, with_depth: bool = True) -> list[SequenceFrame]:
    image = block_texture()
    return [
        SequenceFrame(
            timestamp=0.1 * i,
            color=image,
            depth=np.full((96, 128), 2.0) if with_depth else None,
            gt_pose=GT_POSE,
        )
        for i in range(n)
    ]


def shifted_frames(n: int) -> list[SequenceFrame]:
    """Camera sliding along +x over a fronto-parallel plane at 2 m.

    A 2 px crop shift per frame equals 0.04 m of travel at f=100 px.
    """
    blocks = np.random.default_rng(4).integers(0, 2, size=(12, 24)).astype(np.float64)
    wide = np.repeat((0.15 + 0.7 * np.kron(blocks, np.ones((8, 8))))[..., None], 3, axis=2)
    return [
        SequenceFrame(
            timestamp=0.1 * i,
            color=wide[:, 16 + 2 * i:144 + 2 * i].copy(),
            depth=np.full((96, 128), 2.0),
            gt_pose=Pose(translation=np.array([-0.04 * i, 0.0, 0.0])),
        )
        for i in range(n)
    ]


def flat_frame(timestamp: float) -> SequenceFrame:
    return SequenceFrame(timestamp=timestamp, color=np.full((96, 128, 3), 0.5),
                         depth=np.full((96, 128), 2.0), gt_pose=GT_POSE)


def config(**overrides) -> SlamConfig:
    return SlamConfig(**{**FAST, **overrides})


# ---------------------------------------------------------------------------
# Builders and report
# ---------------------------------------------------------------------------


class TestBuilders:
    def test_values_forwarded(self) -> None:
        cfg = SlamConfig(lm_rounds=2, gp_levels=3, tile_size=8, sh_degree=1, kf_max_gap=7, sim3_tau=0.1)
        assert build_lm_config(cfg).rounds == 2
        assert build_schedule(cfg).n == 3
        raster = build_raster(cfg)
        assert (raster.tile_size, raster.sh_degree) == (8, 1)
        assert build_policy(cfg).f_max == 7
        assert build_loop_params(cfg).tau == 0.1

    def test_loop_scale_follows_mode(self) -> None:
        assert build_loop_params(SlamConfig(mode="mono")).with_scale is True
        assert build_loop_params(SlamConfig(mode="rgbd")).with_scale is False


class TestRunReport:
    def test_to_dict_drops_bulk_fields(self) -> None:
        report = RunReport(ate_rmse=0.01, trajectory=[(0.0, Pose.identity())], renders={0: np.zeros((2, 2, 3))})
        data = report.to_dict()
        assert "trajectory" not in data and "renders" not in data
        assert data["ate_rmse"] == 0.01 and data["lpips"] is None
        json.dumps(data)

    def test_timing_optional(self) -> None:
        data = RunReport().to_dict(include_timing=False)
        assert "tracking_fps" not in data and "rendering_fps" not in data


# ---------------------------------------------------------------------------
# Input gating
# ---------------------------------------------------------------------------


class TestGating:
    def test_empty_sequence(self) -> None:
        with pytest.raises(ConfigError, match="empty"):
            run_slam([], config(), K)

    def test_rgbd_needs_depth(self) -> None:
        with pytest.raises(ConfigError, match="mono"):
            run_slam(static_frames(2, with_depth=False), config(), K)

    def test_mono_single_view_cannot_initialise(self) -> None:
        with pytest.raises(TrackingLost) as info:
            run_slam(static_frames(1, with_depth=False), config(mode="mono"), K)
        report = info.value.report
        assert report.tracking_lost is True
        assert report.n_keyframes == 0 and report.ate_rmse is None and report.trajectory == []


# ---------------------------------------------------------------------------
# End-to-end RGB-D
# ---------------------------------------------------------------------------


class TestRgbdRun:
    def test_static_camera(self) -> None:
        report, system = run_slam(static_frames(2), config(), K)
        assert report.n_frames == 2 and report.n_keyframes >= 1
        assert len(report.trajectory) == 2
        for t, pose in report.trajectory:
            assert pose.almost_equal(GT_POSE, tol=1e-6)
        assert report.ate_rmse == pytest.approx(0.0, abs=1e-6)
        assert report.n_primitives == len(system.hmap.primitives) > 0
        assert report.psnr is not None and report.tracking_lost is False
        assert report.model_size_bytes >= HPM_HEADER_BYTES + report.n_primitives * HPM_RECORD_BYTES
        assert report.lpips is None

    def test_deterministic(self) -> None:
        a, sys_a = run_slam(static_frames(2), config(), K)
        b, sys_b = run_slam(static_frames(2), config(), K)
        assert a.to_dict(include_timing=False) == b.to_dict(include_timing=False)
        for (ta, pa), (tb, pb) in zip(a.trajectory, b.trajectory):
            assert ta == tb and np.array_equal(pa.translation, pb.translation)
        items_a, items_b = sys_a.hmap.primitive_items(), sys_b.hmap.primitive_items()
        assert [pid for pid, _ in items_a] == [pid for pid, _ in items_b]
        for (_, p), (_, q) in zip(items_a, items_b):
            assert np.array_equal(p.position, q.position) and np.array_equal(p.sh, q.sh)

    def test_max_frames(self) -> None:
        report, _ = run_slam(static_frames(3), config(max_frames=1), K)
        assert report.n_frames == 1 and len(report.trajectory) == 1

    def test_concurrent_workers(self) -> None:
        report, system = run_slam(static_frames(1), config(threads=2), K)
        assert report.n_keyframes == 1
        assert report.trajectory[0][1].almost_equal(GT_POSE)
        assert len(system.hmap.primitives) > 0

    def test_sliding_camera_follows_ground_truth(self) -> None:
        frames = shifted_frames(8)
        report, _ = run_slam(frames, config(n_octaves=1), K)
        assert report.tracking_lost is False and len(report.trajectory) == 8
        for frame, (t, pose) in zip(frames, report.trajectory):
            assert t == frame.timestamp
            assert np.linalg.norm(pose.camera_center() - frame.gt_pose.camera_center()) < 1e-3
        assert report.ate_rmse < 1e-3

    def test_concurrent_matches_sequential_trajectory(self) -> None:
        sequential, _ = run_slam(shifted_frames(8), config(n_octaves=1), K)
        concurrent, _ = run_slam(shifted_frames(8), config(n_octaves=1, threads=2), K)
        assert len(concurrent.trajectory) == len(sequential.trajectory)
        for (_, a), (_, b) in zip(sequential.trajectory, concurrent.trajectory):
            assert np.linalg.norm(a.camera_center() - b.camera_center()) < 1e-3

    def test_single_pyramid_level_trains_at_full_resolution(self) -> None:
        _, flat = run_slam(shifted_frames(3), config(n_octaves=1, gp_levels=0), K)
        _, pyramid = run_slam(shifted_frames(3), config(n_octaves=1, gp_levels=2), K)
        for system, levels in ((flat, 1), (pyramid, 3)):
            trained = [kf.pyramid_cache for kf in system.hmap.keyframes.values() if kf.pyramid_cache is not None]
            assert trained and {len(cache) for cache in trained} == {levels}

    def test_tracking_lost_keeps_partial_run(self) -> None:
        frames = static_frames(1) + [flat_frame(0.1), flat_frame(0.2)]
        with pytest.raises(TrackingLost) as info:
            run_slam(frames, config(), K)
        exc = info.value
        assert exc.system is not None
        assert exc.report.tracking_lost is True
        assert len(exc.report.trajectory) == 3
        assert exc.report.n_keyframes == 1


# ---------------------------------------------------------------------------
# Offline baseline
# ---------------------------------------------------------------------------


class TestTrainOffline:
    def test_random_init(self) -> None:
        frames = static_frames(4)
        report, system = train_offline(frames, config(kf_max_gap=2), K, n_random=10, iterations=3)
        assert report.n_keyframes == 2 and report.n_frames == 4
        assert [t for t, _ in report.trajectory] == [0.0, pytest.approx(0.2)]
        assert report.model_size_bytes == HPM_HEADER_BYTES + report.n_primitives * HPM_RECORD_BYTES
        assert report.ate_rmse is None

    def test_map_init_drops_descriptors(self, tmp_path: Path) -> None:
        hmap = HyperMap()
        for x in (-0.2, 0.0, 0.2):
            hmap.add_primitive(HyperPrimitive(position=np.array([x, 0.0, 2.0]), log_scale=np.log([0.05] * 3),
                                              descriptor=np.zeros(32, np.uint8)))
        write_map(tmp_path / "map.hpm", hmap)
        report, system = train_offline(static_frames(2), config(), K, init_map=tmp_path / "map.hpm", iterations=1)
        assert all(p.descriptor is None for _, p in system.hmap.primitive_items())
        assert report.model_size_bytes == HPM_HEADER_BYTES + report.n_primitives * HPM_RECORD_BYTES

    def test_requires_ground_truth(self) -> None:
        frames = [SequenceFrame(timestamp=0.0, color=block_texture())]
        with pytest.raises(ConfigError, match="ground-truth"):
            train_offline(frames, config(), K)
