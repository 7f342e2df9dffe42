"""Tests for scripts/synth_scene.py.

Covers:
- SceneSpec validation and YAML loading (unknown keys, shipped scene file)
- look_at orientation and the orbit geometry
- make_scene determinism
- render_depth on a single opaque Gaussian and on an empty scene
- write_synthetic_sequence output read back through the synthetic loader
"""

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from dataset_loaders import load_sequence  # noqa: E402
from hyper_core import HyperPrimitive, Intrinsics, Pose  # noqa: E402
from map_io import decode_hpm  # noqa: E402
from slam_config import ConfigError  # noqa: E402
from splat_rasterizer import GaussianBatch  # noqa: E402
from synth_scene import (  # noqa: E402
    SceneSpec,
    load_scene_spec,
    look_at,
    make_scene,
    orbit_poses,
    render_depth,
    render_views,
    write_synthetic_sequence,
)

TINY = SceneSpec(n_primitives=30, n_frames=4, width=40, height=30, orbit_arc_deg=40.0, seed=3)


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


class TestSceneSpec:
    def test_shipped_scene_is_default(self) -> None:
        assert load_scene_spec(REPO_ROOT / "config" / "synthetic_scene.yaml") == SceneSpec()
        assert load_scene_spec(None) == SceneSpec()

    def test_unknown_key(self, tmp_path: Path) -> None:
        path = tmp_path / "scene.yaml"
        path.write_text("n_prims: 10\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="n_prims"):
            load_scene_spec(path)

    def test_non_mapping(self, tmp_path: Path) -> None:
        path = tmp_path / "scene.yaml"
        path.write_text("- 1\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_scene_spec(path)

    @pytest.mark.parametrize("kwargs", [
        {"n_frames": 0}, {"opacity": 1.0}, {"scale_max": 0.01}, {"orbit_radius": 1.0},
    ])
    def test_invalid_values(self, kwargs: dict) -> None:
        with pytest.raises(ConfigError):
            SceneSpec(**kwargs)

    def test_intrinsics_defaults(self) -> None:
        K = TINY.intrinsics()
        assert (K.fx, K.fy, K.cx, K.cy, K.width, K.height) == (32.0, 32.0, 20.0, 15.0, 40, 30)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


class TestGeometry:
    def test_look_at_centres_target(self) -> None:
        eye = np.array([3.0, 0.0, 0.5])
        pose = look_at(eye, np.zeros(3))
        np.testing.assert_allclose(pose.camera_center(), eye, atol=1e-12)
        np.testing.assert_allclose(pose.transform(np.zeros(3)), [0.0, 0.0, np.linalg.norm(eye)], atol=1e-12)
        assert np.linalg.det(pose.R) == pytest.approx(1.0)

    def test_world_up_is_image_up(self) -> None:
        pose = look_at(np.array([3.0, 0.0, 0.0]), np.zeros(3))
        assert pose.transform(np.array([0.0, 0.0, 1.0]))[1] < 0

    def test_orbit(self) -> None:
        poses = orbit_poses(TINY)
        assert len(poses) == 4
        for pose in poses:
            c = pose.camera_center()
            assert np.hypot(c[0], c[1]) == pytest.approx(TINY.orbit_radius)
            assert c[2] == pytest.approx(TINY.orbit_height)
            np.testing.assert_allclose(pose.transform(np.zeros(3))[:2], 0.0, atol=1e-9)

    def test_make_scene_deterministic(self) -> None:
        a, b = make_scene(TINY), make_scene(TINY)
        assert len(a) == 30
        assert all(np.array_equal(p.position, q.position) for p, q in zip(a, b))
        assert np.all(np.abs([p.position for p in a]) <= TINY.extent / 2)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


class TestRenderDepth:
    K = Intrinsics(32.0, 32.0, 20.0, 15.0, 40, 30)

    def test_single_opaque_gaussian(self) -> None:
        prim = HyperPrimitive(position=np.array([0.0, 0.0, 2.0]), log_scale=np.log([0.3] * 3), opacity_logit=5.0)
        depth = render_depth(GaussianBatch.from_primitives([prim]), Pose.identity(), self.K)
        assert depth[15, 20] == pytest.approx(2.0, abs=1e-9)
        assert depth[0, 0] == 0.0

    def test_empty_scene(self) -> None:
        depth = render_depth(GaussianBatch.from_primitives([]), Pose.identity(), self.K)
        assert depth.shape == (30, 40) and not depth.any()

    def test_render_views_pairs(self) -> None:
        prims = make_scene(TINY)
        views = list(render_views(prims, orbit_poses(TINY), TINY.intrinsics()))
        assert len(views) == 4
        rgb, depth = views[0]
        assert rgb.shape == (30, 40, 3) and depth.shape == (30, 40)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0
        covered = depth > 0
        assert covered.any()
        # every surface lies inside the cube seen from outside it
        lo = TINY.orbit_radius - TINY.extent
        hi = np.hypot(TINY.orbit_radius, TINY.orbit_height) + TINY.extent
        assert np.all((depth[covered] > lo) & (depth[covered] < hi))


class TestWriteSyntheticSequence:
    def test_layout_and_reload(self, tmp_path: Path) -> None:
        paths = write_synthetic_sequence(tmp_path / "seq", TINY)
        for key in ("rgb", "depth", "groundtruth", "camera", "scene"):
            assert paths[key].is_file()
        assert len(list((tmp_path / "seq" / "rgb").glob("*.png"))) == 4
        assert len(decode_hpm(paths["scene"].read_bytes())) == 30

        seq = load_sequence(tmp_path / "seq", "synthetic")
        assert seq.intrinsics == TINY.intrinsics()
        assert len(seq.frames) == 4
        expected = orbit_poses(TINY)
        for frame, pose in zip(seq.frames, expected):
            assert frame.depth_path is not None
            assert frame.gt_pose.almost_equal(pose, tol=1e-7)
        assert seq.frames[1].timestamp == pytest.approx(1.0 / TINY.fps, abs=1e-6)

        _, depth = next(render_views(make_scene(TINY), expected[:1], TINY.intrinsics()))
        loaded = seq.frames[0].load_depth(seq.intrinsics.depth_scale)
        np.testing.assert_allclose(loaded, depth, atol=1.0 / TINY.depth_scale)
