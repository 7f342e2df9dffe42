"""Tests for scripts/dataset_loaders.py.

Covers:
- TUM: timestamp association of depth and ground truth, misses, comments,
  duplicate stamps, camera-to-world conversion, image decoding
- Replica: frame / depth pairing, 4x4 trajectory parsing and its errors
- camera.yaml round trip and missing keys
- load_sequence: per-format intrinsics and depth-scale defaults
"""

import sys
from pathlib import Path

import cv2
import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from dataset_loaders import (  # noqa: E402
    REPLICA_DEPTH_SCALE,
    TUM_DEPTH_SCALE,
    EmptySequence,
    MalformedPose,
    MissingManifest,
    load_camera,
    load_replica_sequence,
    load_sequence,
    load_tum_sequence,
    read_tum_trajectory,
    tum_pose,
    write_camera,
)
from hyper_core import Intrinsics, Pose  # noqa: E402


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def write_png(path: Path, rgb: tuple[int, int, int] = (200, 100, 50)) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.zeros((4, 6, 3), np.uint8)
    img[:] = rgb[::-1]
    assert cv2.imwrite(str(path), img)


def write_depth(path: Path, raw: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    assert cv2.imwrite(str(path), np.full((4, 6), raw, np.uint16))


def tum_fixture(root: Path, depth_offsets=(0.005, 0.005, 0.005)) -> Path:
    stamps = [1.0, 1.1, 1.2]
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth"]
    gt_lines = ["# timestamp tx ty tz qx qy qz qw"]
    for i, (t, off) in enumerate(zip(stamps, depth_offsets)):
        write_png(root / "rgb" / f"{t:.6f}.png")
        write_depth(root / "depth" / f"{t:.6f}.png", 10000)
        rgb_lines.append(f"{t:.6f} rgb/{t:.6f}.png")
        depth_lines.append(f"{t + off:.6f} depth/{t:.6f}.png")
        gt_lines.append(f"{t + 0.001:.6f} {0.1 * i} 0.0 1.0 0 0 0 1")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n", encoding="utf-8")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n", encoding="utf-8")
    (root / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n", encoding="utf-8")
    return root


def replica_fixture(root: Path, rows: list[str] | None = None) -> Path:
    for i in range(3):
        write_png(root / "results" / f"frame{i:06d}.png")
        write_depth(root / "results" / f"depth{i:06d}.png", 13107)
    if rows is None:
        rows = [
            "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1",
            "1 0 0 0.5 0 1 0 0 0 0 1 0 0 0 0 1",
            "0 -1 0 0 1 0 0 0 0 0 1 2 0 0 0 1",
        ]
    (root / "traj.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# TUM
# ---------------------------------------------------------------------------


class TestTum:
    def test_association(self, tmp_path: Path) -> None:
        frames = load_tum_sequence(tum_fixture(tmp_path))
        assert [f.timestamp for f in frames] == [1.0, 1.1, 1.2]
        assert all(f.depth_path is not None and f.gt_pose is not None for f in frames)
        np.testing.assert_allclose(frames[2].gt_pose.camera_center(), [0.2, 0.0, 1.0], atol=1e-12)

    def test_depth_outside_window_left_unassociated(self, tmp_path: Path) -> None:
        frames = load_tum_sequence(tum_fixture(tmp_path, depth_offsets=(0.005, 0.05, 0.005)))
        assert frames[1].depth_path is None
        assert frames[0].depth_path is not None and frames[2].depth_path is not None

    def test_duplicate_stamp_dropped(self, tmp_path: Path) -> None:
        tum_fixture(tmp_path)
        with open(tmp_path / "rgb.txt", "a", encoding="utf-8") as fh:
            fh.write("1.100000 rgb/1.000000.png\n")
        assert len(load_tum_sequence(tmp_path)) == 3

    def test_decodes_images(self, tmp_path: Path) -> None:
        frame = load_tum_sequence(tum_fixture(tmp_path))[0]
        color = frame.load_color()
        assert color.shape == (4, 6, 3)
        np.testing.assert_allclose(color[0, 0], np.array([200, 100, 50]) / 255.0)
        np.testing.assert_allclose(frame.load_depth(TUM_DEPTH_SCALE), 2.0)

    def test_undecodable_image(self, tmp_path: Path) -> None:
        frame = load_tum_sequence(tum_fixture(tmp_path))[0]
        frame.color_path.write_bytes(b"not a png")
        with pytest.raises(OSError):
            frame.load_color()

    def test_missing_index(self, tmp_path: Path) -> None:
        with pytest.raises(MissingManifest):
            load_tum_sequence(tmp_path)

    def test_empty_index(self, tmp_path: Path) -> None:
        (tmp_path / "rgb.txt").write_text("# nothing here\n\n", encoding="utf-8")
        with pytest.raises(EmptySequence):
            load_tum_sequence(tmp_path)

    def test_malformed_groundtruth(self, tmp_path: Path) -> None:
        tum_fixture(tmp_path)
        (tmp_path / "groundtruth.txt").write_text("1.0 0 0 0 0 0 1\n", encoding="utf-8")
        with pytest.raises(MalformedPose):
            load_tum_sequence(tmp_path)

    def test_tum_pose_is_world_to_camera(self) -> None:
        # 90 degrees about z, camera at (1, 2, 3)
        pose = tum_pose([1.0, 2.0, 3.0, 0.0, 0.0, np.sqrt(0.5), np.sqrt(0.5)])
        np.testing.assert_allclose(pose.camera_center(), [1.0, 2.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(pose.transform(np.array([1.0, 3.0, 3.0])), [1.0, 0.0, 0.0], atol=1e-12)

    def test_zero_quaternion(self) -> None:
        with pytest.raises(MalformedPose):
            tum_pose([0, 0, 0, 0, 0, 0, 0])

    def test_read_trajectory(self, tmp_path: Path) -> None:
        path = tmp_path / "traj.txt"
        path.write_text("# header\n0.5 1 2 3 0 0 0 1\n", encoding="utf-8")
        (t, pose), = read_tum_trajectory(path)
        assert t == 0.5
        np.testing.assert_allclose(pose.camera_center(), [1, 2, 3])


# ---------------------------------------------------------------------------
# Replica
# ---------------------------------------------------------------------------


class TestReplica:
    def test_three_frames(self, tmp_path: Path) -> None:
        frames = load_replica_sequence(replica_fixture(tmp_path))
        assert [f.timestamp for f in frames] == [0.0, 1.0, 2.0]
        assert all(f.depth_path is not None for f in frames)
        assert frames[0].gt_pose.almost_equal(Pose.identity())
        np.testing.assert_allclose(frames[1].gt_pose.camera_center(), [0.5, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(frames[2].gt_pose.camera_center(), [0.0, 0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(frames[0].load_depth(REPLICA_DEPTH_SCALE), 2.0)

    def test_short_row(self, tmp_path: Path) -> None:
        rows = ["1 0 0 0 0 1 0 0 0 0 1 0 0 0 0"] * 3
        with pytest.raises(MalformedPose, match=":1:"):
            load_replica_sequence(replica_fixture(tmp_path, rows))

    def test_too_few_poses(self, tmp_path: Path) -> None:
        with pytest.raises(MalformedPose):
            load_replica_sequence(replica_fixture(tmp_path, ["1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1"]))

    def test_missing_trajectory(self, tmp_path: Path) -> None:
        replica_fixture(tmp_path)
        (tmp_path / "traj.txt").unlink()
        with pytest.raises(MissingManifest):
            load_replica_sequence(tmp_path)

    def test_missing_results(self, tmp_path: Path) -> None:
        with pytest.raises(MissingManifest):
            load_replica_sequence(tmp_path)

    def test_no_frames(self, tmp_path: Path) -> None:
        (tmp_path / "results").mkdir()
        (tmp_path / "traj.txt").write_text("", encoding="utf-8")
        with pytest.raises(EmptySequence):
            load_replica_sequence(tmp_path)


# ---------------------------------------------------------------------------
# Camera files and format dispatch
# ---------------------------------------------------------------------------


class TestCamera:
    def test_round_trip(self, tmp_path: Path) -> None:
        K = Intrinsics(256.0, 250.0, 160.0, 120.0, 320, 240, depth_scale=5000.0)
        write_camera(tmp_path / "camera.yaml", K)
        assert load_camera(tmp_path / "camera.yaml") == K

    def test_missing_keys(self, tmp_path: Path) -> None:
        (tmp_path / "camera.yaml").write_text("fx: 100\nfy: 100\n", encoding="utf-8")
        with pytest.raises(MissingManifest, match="cx"):
            load_camera(tmp_path / "camera.yaml")


class TestLoadSequence:
    def test_tum_intrinsics_from_directory_name(self, tmp_path: Path) -> None:
        root = tum_fixture(tmp_path / "rgbd_dataset_freiburg2_xyz")
        seq = load_sequence(root, "tum")
        assert seq.intrinsics.fx == 520.9
        assert seq.intrinsics.depth_scale == TUM_DEPTH_SCALE
        assert seq.name == "rgbd_dataset_freiburg2_xyz"

    def test_replica_defaults(self, tmp_path: Path) -> None:
        seq = load_sequence(replica_fixture(tmp_path), "replica")
        assert (seq.intrinsics.width, seq.intrinsics.height) == (1200, 680)
        assert seq.intrinsics.depth_scale == REPLICA_DEPTH_SCALE

    def test_explicit_depth_scale(self, tmp_path: Path) -> None:
        seq = load_sequence(tum_fixture(tmp_path), "tum", depth_scale=1000.0)
        assert seq.intrinsics.depth_scale == 1000.0

    def test_synthetic_requires_camera(self, tmp_path: Path) -> None:
        tum_fixture(tmp_path)
        with pytest.raises(MissingManifest):
            load_sequence(tmp_path, "synthetic")
        write_camera(tmp_path / "camera.yaml", Intrinsics(5.0, 5.0, 3.0, 2.0, 6, 4, depth_scale=5000.0))
        seq = load_sequence(tmp_path, "synthetic")
        assert seq.intrinsics.width == 6 and len(seq.frames) == 3

    def test_unknown_format(self, tmp_path: Path) -> None:
        with pytest.raises(ValueError):
            load_sequence(tmp_path, "kitti")
