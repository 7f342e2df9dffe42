#!/usr/bin/env python3
"""Real spherical-harmonics colour model (degree <= 3, 16 coefficients per channel).

Basis ordering and constants follow the splatting renderer convention:
band 0 is the constant term, band 1 is (-y, z, -x), bands 2 and 3 follow.
Colours are ``max(0, Σ_k Y_k(dir)·c_k + 0.5)`` per channel.
"""

from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

SH_C0: float = 0.28209479177387814
SH_C1: float = 0.4886025119029199
SH_C2: tuple[float, ...] = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3: tuple[float, ...] = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
N_COEFFS: int = 16
MAX_DEGREE: int = 3
_UNIT_TOL: float = 1e-6


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class NonUnitDirection(ValueError):
    """Raised when an SH lookup direction is not unit length."""


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------


def _active(degree: int) -> int:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}] (got {degree})")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int = MAX_DEGREE) -> np.ndarray:
    """Basis values (N×16) at unit directions; bands above ``degree`` are zero."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.zeros((len(dirs), N_COEFFS))
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (xx - yy)
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * x * y * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    out[:, _active(degree):] = 0.0
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int = MAX_DEGREE) -> np.ndarray:
    """Partial derivatives of each basis function w.r.t. (x, y, z): N×16×3."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [
        (zero, zero, zero),
        (zero, -SH_C1 * one, zero),
        (zero, zero, SH_C1 * one),
        (-SH_C1 * one, zero, zero),
        (SH_C2[0] * y, SH_C2[0] * x, zero),
        (zero, SH_C2[1] * z, SH_C2[1] * y),
        (-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z),
        (SH_C2[3] * z, zero, SH_C2[3] * x),
        (2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, zero),
        (6.0 * SH_C3[0] * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), zero),
        (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
        (-2.0 * SH_C3[2] * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * SH_C3[2] * y * z),
        (-6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
        (SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * SH_C3[4] * x * y, 8.0 * SH_C3[4] * x * z),
        (2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
        (SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, zero),
    ]
    jac = np.stack([np.stack(r, axis=1) for r in rows], axis=1)
    jac[:, _active(degree):, :] = 0.0
    return jac


def sh_eval(sh: np.ndarray, direction: np.ndarray, degree: int = MAX_DEGREE) -> np.ndarray:
    """RGB colour of one primitive's 16×3 coefficients seen along ``direction``."""
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(float(np.linalg.norm(d)) - 1.0) > _UNIT_TOL:
        raise NonUnitDirection(f"direction norm {np.linalg.norm(d):.6g} is not 1")
    raw = sh_basis(d[None, :], degree)[0] @ np.asarray(sh, dtype=np.float64).reshape(N_COEFFS, 3)
    return np.maximum(raw + 0.5, 0.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient reproducing ``rgb`` for every view direction."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
