"""Tests for scripts/evaluation.py.

Covers:
- compute_ate: perfect and rigidly offset estimates, known residual RMSE,
  invariance to a rigid change of the estimate's frame, Sim(3) vs SE(3)
- compute_psnr: cap, known values, shape mismatch
- evaluate_renders: empty keyframe list, perfect reconstruction
"""

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from evaluation import PSNR_CAP_DB, compute_ate, compute_psnr, evaluate_renders  # noqa: E402
from hyper_core import HyperMap, HyperPrimitive, Intrinsics, Keyframe, Pose, Sim3, TooFewPairs, so3_exp  # noqa: E402
from photomap import DimensionMismatch  # noqa: E402
from sh_basis import rgb_to_sh_dc  # noqa: E402
from splat_rasterizer import GaussianBatch, render  # noqa: E402


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def trajectory(centers: np.ndarray, t0: float = 0.0) -> list[tuple[float, Pose]]:
    return [(t0 + 0.1 * i, Pose(translation=-np.asarray(c, dtype=np.float64))) for i, c in enumerate(centers)]


def gt_centers(n: int = 12, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-2, 2, size=(n, 3))


# ---------------------------------------------------------------------------
# ATE
# ---------------------------------------------------------------------------


class TestComputeAte:
    def test_perfect_estimate(self) -> None:
        gt = trajectory(gt_centers())
        rmse, std = compute_ate(gt, gt)
        assert rmse == pytest.approx(0.0, abs=1e-9) and std == pytest.approx(0.0, abs=1e-9)

    def test_translated_estimate_aligns_away(self) -> None:
        c = gt_centers()
        rmse, _ = compute_ate(trajectory(c + np.array([1.0, 0.0, 0.0])), trajectory(c))
        assert rmse == pytest.approx(0.0, abs=1e-9)

    def test_alternating_offsets(self) -> None:
        # each centre visited twice, once 1 cm above and once 1 cm below
        base = np.repeat(gt_centers(6), 2, axis=0)
        offsets = np.tile([[0.0, 0.0, 0.01], [0.0, 0.0, -0.01]], (6, 1))
        rmse, std = compute_ate(trajectory(base + offsets), trajectory(base))
        assert rmse == pytest.approx(0.01, abs=1e-9)
        assert std == pytest.approx(0.0, abs=1e-9)

    def test_invariant_to_rigid_frame_change(self) -> None:
        c = gt_centers()
        noisy = c + np.random.default_rng(1).normal(scale=0.02, size=c.shape)
        moved = Sim3.from_srt(1.0, so3_exp(np.array([0.3, -0.2, 0.5])), np.array([4.0, -1.0, 2.0])).apply(noisy)
        a = compute_ate(trajectory(noisy), trajectory(c))
        b = compute_ate(trajectory(moved), trajectory(c))
        assert a == pytest.approx(b, abs=1e-9)

    def test_scale_needs_sim3(self) -> None:
        c = gt_centers()
        scaled = trajectory(2.0 * c)
        assert compute_ate(scaled, trajectory(c), align="sim3")[0] == pytest.approx(0.0, abs=1e-9)
        assert compute_ate(scaled, trajectory(c), align="se3")[0] > 0.1

    def test_unassociated_stamps(self) -> None:
        c = gt_centers()
        with pytest.raises(TooFewPairs):
            compute_ate(trajectory(c, t0=100.0), trajectory(c))

    def test_invalid_alignment(self) -> None:
        gt = trajectory(gt_centers())
        with pytest.raises(ValueError):
            compute_ate(gt, gt, align="affine")


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------


class TestComputePsnr:
    def test_identical_is_capped(self) -> None:
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert compute_psnr(img, img) == PSNR_CAP_DB == 99.0

    @pytest.mark.parametrize("value,expected", [(0.1, 20.0), (1.0, 0.0)])
    def test_known_values(self, value: float, expected: float) -> None:
        assert compute_psnr(np.zeros((4, 4)), np.full((4, 4), value)) == pytest.approx(expected)

    def test_shape_mismatch(self) -> None:
        with pytest.raises(DimensionMismatch):
            compute_psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# Keyframe renders
# ---------------------------------------------------------------------------


class TestEvaluateRenders:
    def test_no_keyframes(self) -> None:
        metrics = evaluate_renders(HyperMap(), [])
        assert (metrics.psnr, metrics.ssim, metrics.rendering_fps, metrics.renders) == (None, None, 0.0, {})

    def test_perfect_reconstruction(self) -> None:
        K = Intrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)
        hmap = HyperMap()
        sh = np.zeros((16, 3))
        sh[0] = rgb_to_sh_dc(np.array([0.8, 0.3, 0.2]))
        pid = hmap.add_primitive(HyperPrimitive(position=np.array([0.0, 0.0, 2.0]),
                                                log_scale=np.log([0.2] * 3), opacity_logit=2.0, sh=sh))
        batch = GaussianBatch.from_primitives([hmap.primitives[pid]], [pid])
        image = np.clip(render(batch, Pose.identity(), K).image, 0.0, 1.0)
        kf = Keyframe(id=-1, timestamp=0.0, pose=Pose.identity(), intrinsics=K, image=image)
        hmap.add_keyframe(kf)

        metrics = evaluate_renders(hmap, [kf])
        assert metrics.psnr == 99.0
        assert metrics.ssim == pytest.approx(1.0, abs=1e-9)
        assert metrics.rendering_fps > 0
        assert set(metrics.renders) == {kf.id}
