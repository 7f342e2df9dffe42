"""Tests for scripts/sh_basis.py.

Covers:
- degree-0 coefficients reproduce a colour from every direction
- degree masking zeroes the higher bands
- basis Jacobian agrees with central differences
- clamping at zero and non-unit direction rejection
"""

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from sh_basis import (  # noqa: E402
    N_COEFFS,
    NonUnitDirection,
    rgb_to_sh_dc,
    sh_basis,
    sh_basis_jacobian,
    sh_eval,
)


def random_dirs(n: int, seed: int = 0) -> np.ndarray:
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestDcColour:
    def test_round_trip_from_any_direction(self) -> None:
        rgb = np.array([0.2, 0.55, 0.9])
        sh = np.zeros((N_COEFFS, 3))
        sh[0] = rgb_to_sh_dc(rgb)
        for d in random_dirs(10):
            np.testing.assert_allclose(sh_eval(sh, d), rgb, atol=1e-12)

    def test_negative_colour_clamped(self) -> None:
        sh = np.zeros((N_COEFFS, 3))
        sh[0] = rgb_to_sh_dc(np.array([-1.0, -1.0, -1.0]))
        assert np.all(sh_eval(sh, np.array([0.0, 0.0, 1.0])) == 0.0)


class TestBasis:
    @pytest.mark.parametrize("degree,active", [(0, 1), (1, 4), (2, 9), (3, 16)])
    def test_degree_masks_higher_bands(self, degree: int, active: int) -> None:
        b = sh_basis(random_dirs(5), degree)
        assert np.all(b[:, active:] == 0.0)
        assert np.all(np.any(b[:, :active] != 0.0, axis=0))

    def test_invalid_degree(self) -> None:
        with pytest.raises(ValueError):
            sh_basis(random_dirs(1), 4)

    def test_band_one_sign_convention(self) -> None:
        b = sh_basis(np.array([[0.0, 0.0, 1.0]]))[0]
        assert b[2] > 0 and b[1] == 0 and b[3] == 0

    def test_jacobian_matches_finite_differences(self) -> None:
        dirs = random_dirs(4, seed=7)
        jac = sh_basis_jacobian(dirs)
        eps = 1e-6
        for k in range(3):
            step = np.zeros(3)
            step[k] = eps
            fd = (sh_basis(dirs + step) - sh_basis(dirs - step)) / (2 * eps)
            np.testing.assert_allclose(jac[:, :, k], fd, atol=1e-7)

    def test_non_unit_direction_rejected(self) -> None:
        with pytest.raises(NonUnitDirection):
            sh_eval(np.zeros((N_COEFFS, 3)), np.array([0.0, 0.0, 2.0]))
