"""Tests for scripts/feature_extractor.py.

Covers:
- extract_features: output shapes, target count, border handling, flat and tiny images
- grid bucketing spreads keypoints over the image
- match_descriptors against a brute-force Hamming oracle on random instances
- matching a shifted image recovers the shift
"""

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from feature_extractor import (  # noqa: E402
    GRID_CELL_PX,
    ImageTooSmall,
    extract_features,
    hamming,
    hamming_matrix,
    keypoints_to_array,
    match_descriptors,
    to_gray_u8,
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def block_texture(size: int = 160, block: int = 8, seed: int = 0) -> np.ndarray:
    """Float RGB image of random grey blocks (plenty of corners)."""
    rng = np.random.default_rng(seed)
    cells = rng.uniform(0.0, 1.0, size=(size // block, size // block))
    gray = np.kron(cells, np.ones((block, block)))
    return np.repeat(gray[..., None], 3, axis=2)


def brute_force_matches(a: np.ndarray, b: np.ndarray, max_hamming: int, ratio: float) -> list[tuple[int, int]]:
    out = []
    for i in range(len(a)):
        d = [hamming(a[i], b[j]) for j in range(len(b))]
        j_best = min(range(len(b)), key=lambda j: (d[j], j))
        second = sorted(d)[1] if len(b) > 1 else float("inf")
        if d[j_best] > max_hamming or not d[j_best] < ratio * second:
            continue
        col = [hamming(a[k], b[j_best]) for k in range(len(a))]
        if min(range(len(a)), key=lambda k: (col[k], k)) != i:
            continue
        out.append((i, j_best))
    return out


def noisy_copies(rng: np.random.Generator, n_a: int, n_b: int, flips: int) -> tuple[np.ndarray, np.ndarray]:
    a = rng.integers(0, 256, size=(n_a, 32), dtype=np.uint8)
    b = rng.integers(0, 256, size=(n_b, 32), dtype=np.uint8)
    shared = min(n_a, n_b) // 2
    for i in range(shared):
        row = np.unpackbits(a[i])
        row[rng.choice(256, size=flips, replace=False)] ^= 1
        b[(i * 7) % n_b] = np.packbits(row)
    return a, b


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


class TestExtractFeatures:
    def test_shapes_and_dtype(self) -> None:
        kps, desc = extract_features(block_texture(), target_count=200)
        assert 0 < len(kps) <= 200
        assert desc.shape == (len(kps), 32)
        assert desc.dtype == np.uint8

    def test_keypoints_inside_image(self) -> None:
        img = block_texture()
        kps, _ = extract_features(img, target_count=300)
        arr = keypoints_to_array(kps)
        assert np.all(arr[:, 0] >= 0) and np.all(arr[:, 0] < img.shape[1])
        assert np.all(arr[:, 1] >= 0) and np.all(arr[:, 1] < img.shape[0])
        assert set(arr[:, 2].astype(int)) <= set(range(8))

    def test_target_count_respected(self) -> None:
        kps, _ = extract_features(block_texture(), target_count=25)
        assert len(kps) <= 25

    def test_bucketing_spreads_keypoints(self) -> None:
        kps, _ = extract_features(block_texture(size=192), target_count=50)
        cells = {(int(k.u // GRID_CELL_PX), int(k.v // GRID_CELL_PX)) for k in kps}
        assert len(cells) >= 9

    def test_flat_image_has_no_features(self) -> None:
        kps, desc = extract_features(np.full((100, 100, 3), 0.5))
        assert kps == [] and desc.shape == (0, 32)

    def test_tiny_image_raises(self) -> None:
        with pytest.raises(ImageTooSmall):
            extract_features(np.zeros((20, 20)))

    def test_invalid_target_count(self) -> None:
        with pytest.raises(ValueError):
            extract_features(block_texture(), target_count=0)

    def test_deterministic(self) -> None:
        img = block_texture(seed=3)
        k1, d1 = extract_features(img, target_count=100)
        k2, d2 = extract_features(img, target_count=100)
        assert keypoints_to_array(k1).tolist() == keypoints_to_array(k2).tolist()
        assert np.array_equal(d1, d2)


class TestToGray:
    def test_float_rgb_to_uint8(self) -> None:
        gray = to_gray_u8(np.ones((4, 4, 3)))
        assert gray.dtype == np.uint8 and np.all(gray == 255)

    def test_uint8_gray_passthrough(self) -> None:
        img = np.arange(16, dtype=np.uint8).reshape(4, 4)
        assert to_gray_u8(img) is img


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


class TestHamming:
    def test_known_distance(self) -> None:
        a = np.zeros(32, np.uint8)
        b = np.zeros(32, np.uint8)
        b[0] = 0b1011
        assert hamming(a, b) == 3

    def test_matrix_matches_scalar(self) -> None:
        rng = np.random.default_rng(1)
        a = rng.integers(0, 256, size=(5, 32), dtype=np.uint8)
        b = rng.integers(0, 256, size=(4, 32), dtype=np.uint8)
        m = hamming_matrix(a, b)
        assert all(m[i, j] == hamming(a[i], b[j]) for i in range(5) for j in range(4))


class TestMatchDescriptors:
    @pytest.mark.parametrize("seed", range(20))
    def test_equals_brute_force(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        n_a, n_b = int(rng.integers(1, 60)), int(rng.integers(1, 60))
        a, b = noisy_copies(rng, n_a, n_b, flips=int(rng.integers(0, 40)))
        max_hamming = int(rng.integers(20, 90))
        ratio = float(rng.uniform(0.5, 1.0))
        assert match_descriptors(a, b, max_hamming, ratio) == brute_force_matches(a, b, max_hamming, ratio)

    def test_injective(self) -> None:
        rng = np.random.default_rng(99)
        a, b = noisy_copies(rng, 80, 80, flips=5)
        pairs = match_descriptors(a, b)
        assert len({i for i, _ in pairs}) == len(pairs)
        assert len({j for _, j in pairs}) == len(pairs)

    def test_empty_inputs(self) -> None:
        assert match_descriptors(np.zeros((0, 32), np.uint8), np.zeros((3, 32), np.uint8)) == []

    @pytest.mark.parametrize("ratio", [0.0, 1.5])
    def test_invalid_ratio(self, ratio: float) -> None:
        with pytest.raises(ValueError):
            match_descriptors(np.zeros((1, 32), np.uint8), np.zeros((1, 32), np.uint8), ratio=ratio)

    def test_shifted_image_matches_with_shift(self) -> None:
        img = block_texture(size=192, seed=5)
        shifted = np.roll(img, 4, axis=1)
        ka, da = extract_features(img, target_count=300)
        kb, db = extract_features(shifted, target_count=300)
        pairs = match_descriptors(da, db)
        assert len(pairs) >= 10
        du = np.array([kb[j].u - ka[i].u for i, j in pairs])
        assert np.median(du) == pytest.approx(4.0, abs=0.5)
