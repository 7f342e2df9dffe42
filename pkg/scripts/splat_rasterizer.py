#!/usr/bin/env python3
"""Splat Rasterizer — differentiable tile-based 3D Gaussian splatting on the CPU.

Forward pass (``render``):
  1. project every primitive: mean2d = π(p_cam), cov2d = J·W·Σ·Wᵀ·Jᵀ + floor·I,
     colour from spherical harmonics along the camera→primitive direction;
  2. cull primitives behind the near plane or whose splat box misses the image;
  3. bin survivors into 16×16 tiles, each tile's list sorted by (depth, id);
  4. per pixel, composite front to back with
     α = min(α_max, σ·exp(-½·dᵀ·cov2d⁻¹·d)), skipping α < α_min and stopping
     before transmittance would fall under T_min.  Background is black.

The splat box half-width is ``m·√λ_max`` with ``m = max(3, √(2·ln(σ/α_min)))``,
so every pixel outside the box would be skipped anyway and the image does not
depend on the tile size.

Backward pass (``render_backward``) replays the cached per-tile α lists and
returns exact reverse-mode gradients for position, rotation (raw quaternion),
log-scale, opacity logit and SH coefficients, plus the NDC-space screen
gradient norm used by densification.

Tiles are independent work items in both passes; with ``workers > 1`` they run
on a thread pool and their partial gradients are reduced in tile order.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hyper_core import HyperPrimitive, Intrinsics, Pose
from sh_basis import MAX_DEGREE, N_COEFFS, sh_basis, sh_basis_jacobian

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

TILE_SIZE: int = 16
ALPHA_MAX: float = 0.99
ALPHA_MIN: float = 1.0 / 255.0
TRANSMITTANCE_MIN: float = 1e-4
COV_FLOOR: float = 0.3          # px², added to the projected covariance diagonal
NEAR_PLANE: float = 0.01        # metres
_MIN_SIGMA_MULT: float = 3.0


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class StaleRenderState(RuntimeError):
    """Raised when the backward pass sees primitives that differ from the forward pass."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = TILE_SIZE
    alpha_max: float = ALPHA_MAX
    alpha_min: float = ALPHA_MIN
    transmittance_min: float = TRANSMITTANCE_MIN
    cov_floor: float = COV_FLOOR
    z_min: float = NEAR_PLANE
    sh_degree: int = MAX_DEGREE
    workers: int = 1


@dataclass(frozen=True)
class ProjectedGaussian:
    """One primitive as seen from one view."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_base: float
    primitive_id: int


class Culled:
    """Sentinel returned by ``project_gaussian`` for primitives that cannot be seen."""

    def __repr__(self) -> str:
        return "Culled"


CULLED = Culled()


@dataclass
class GaussianBatch:
    """Structure-of-arrays view of a primitive list."""

    ids: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    @classmethod
    def from_primitives(
        cls, primitives: Sequence[HyperPrimitive], ids: Sequence[int] | None = None
    ) -> GaussianBatch:
        n = len(primitives)
        if n == 0:
            return cls(
                np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 4)),
                np.zeros((0, 3)), np.zeros(0), np.zeros((0, N_COEFFS, 3)),
            )
        return cls(
            ids=np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64),
            positions=np.stack([p.position for p in primitives]),
            rotations=np.stack([p.rotation for p in primitives]),
            log_scales=np.stack([p.log_scale for p in primitives]),
            opacity_logits=np.array([p.opacity_logit for p in primitives], dtype=np.float64),
            sh=np.stack([p.sh for p in primitives]),
        )

    def __len__(self) -> int:
        return int(len(self.ids))

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for arr in (self.ids, self.positions, self.rotations, self.log_scales, self.opacity_logits, self.sh):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class _Projection:
    """Per-primitive quantities cached between the forward and backward pass."""

    valid: np.ndarray
    p_cam: np.ndarray
    mean2d: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray           # (a, b, c) of the inverse 2D covariance
    rot: np.ndarray             # normalized-quaternion rotation matrices
    T: np.ndarray               # J·W, 2×3
    dirs: np.ndarray
    view_dist: np.ndarray
    color_raw: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    depth_rank: np.ndarray


@dataclass
class _TileState:
    x0: int
    y0: int
    x1: int
    y1: int
    contributors: np.ndarray    # batch indices in compositing order
    alpha: np.ndarray           # K×P effective α (0 where skipped or after early stop)
    raw_ok: np.ndarray          # K×P True where α = σ·g (not clamped, not skipped)


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    tiles: list[_TileState]
    visible_count: int
    pose: Pose
    intrinsics: Intrinsics
    settings: RasterSettings
    batch: GaussianBatch = field(repr=False)
    projection: _Projection = field(repr=False)
    fingerprint: str = ""
    color_override: bool = False


@dataclass
class RenderGradients:
    ids: np.ndarray
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray
    screen_grad_norm: np.ndarray
    visible: np.ndarray


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _quat_matrices(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotation matrices for raw quaternions (N×4, wxyz); also returns q̂ and ‖q‖."""
    norm = np.linalg.norm(q, axis=1)
    qn = q / norm[:, None]
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R, qn, norm


def build_cov3d(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Σ = R·diag(exp(2·log_scale))·Rᵀ for one primitive."""
    R, _, _ = _quat_matrices(np.asarray(rotation, dtype=np.float64).reshape(1, 4))
    M = R[0] * np.exp(np.asarray(log_scale, dtype=np.float64))[None, :]
    return M @ M.T


def _project_batch(
    batch: GaussianBatch,
    pose: Pose,
    K: Intrinsics,
    settings: RasterSettings,
    color_override: np.ndarray | None,
) -> _Projection:
    n = len(batch)
    W = pose.R
    p_cam = batch.positions @ W.T + pose.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = z > settings.z_min
    zs = np.where(in_front, z, 1.0)

    rot, _, _ = _quat_matrices(batch.rotations) if n else (np.zeros((0, 3, 3)), None, None)
    M = rot * np.exp(batch.log_scales)[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    T = J @ W
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += settings.cov_floor
    cov2d[:, 1, 1] += settings.cov_floor

    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], axis=1)
    lam_max = 0.5 * (A + C) + np.sqrt(np.maximum(0.25 * (A - C) ** 2 + B * B, 0.0))

    mean2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    opacity = 1.0 / (1.0 + np.exp(-batch.opacity_logits))
    with np.errstate(divide="ignore"):
        mult = np.sqrt(np.maximum(_MIN_SIGMA_MULT**2, 2.0 * np.log(np.maximum(opacity, 1e-300) / settings.alpha_min)))
    radius = mult * np.sqrt(lam_max)

    center = pose.camera_center()
    view = batch.positions - center
    view_dist = np.linalg.norm(view, axis=1)
    dirs = view / np.where(view_dist > 0, view_dist, 1.0)[:, None]
    if color_override is not None:
        color_raw = np.asarray(color_override, dtype=np.float64).reshape(n, 3)
        color = color_raw
    else:
        basis = sh_basis(dirs, settings.sh_degree) if n else np.zeros((0, N_COEFFS))
        color_raw = np.einsum("nk,nkc->nc", basis, batch.sh) + 0.5
        color = np.maximum(color_raw, 0.0)

    on_image = (
        (mean2d[:, 0] + radius >= 0)
        & (mean2d[:, 0] - radius <= K.width - 1)
        & (mean2d[:, 1] + radius >= 0)
        & (mean2d[:, 1] - radius <= K.height - 1)
    )
    valid = in_front & np.isfinite(radius) & on_image & (opacity >= settings.alpha_min)
    depth_rank = np.lexsort((batch.ids, z)) if n else np.zeros(0, np.int64)
    return _Projection(
        valid=valid, p_cam=p_cam, mean2d=mean2d, cov3d=cov3d, cov2d=cov2d, conic=conic,
        rot=rot, T=T, dirs=dirs, view_dist=view_dist, color_raw=color_raw, color=color,
        opacity=opacity, radius=radius, depth_rank=depth_rank,
    )


def project_gaussian(
    prim: HyperPrimitive,
    pose: Pose,
    K: Intrinsics,
    settings: RasterSettings | None = None,
    primitive_id: int = 0,
) -> ProjectedGaussian | Culled:
    """Per-view projection of a single primitive, or ``CULLED``."""
    settings = settings or RasterSettings()
    batch = GaussianBatch.from_primitives([prim], [primitive_id])
    proj = _project_batch(batch, pose, K, settings, None)
    if not proj.valid[0]:
        return CULLED
    return ProjectedGaussian(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d[0],
        depth=float(proj.p_cam[0, 2]),
        color=proj.color[0],
        alpha_base=float(proj.opacity[0]),
        primitive_id=primitive_id,
    )


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


def _bin_tiles(proj: _Projection, K: Intrinsics, tile: int) -> dict[tuple[int, int], np.ndarray]:
    """Tile (tx, ty) → batch indices in (depth, id) order."""
    n_tx = (K.width + tile - 1) // tile
    n_ty = (K.height + tile - 1) // tile
    bins: dict[tuple[int, int], list[int]] = {}
    for idx in proj.depth_rank:
        if not proj.valid[idx]:
            continue
        u, v = proj.mean2d[idx]
        r = proj.radius[idx]
        tx0 = max(int(np.floor((u - r) / tile)), 0)
        tx1 = min(int(np.floor((u + r) / tile)), n_tx - 1)
        ty0 = max(int(np.floor((v - r) / tile)), 0)
        ty1 = min(int(np.floor((v + r) / tile)), n_ty - 1)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                bins.setdefault((tx, ty), []).append(int(idx))
    return {key: np.asarray(val, dtype=np.int64) for key, val in sorted(bins.items(), key=lambda kv: (kv[0][1], kv[0][0]))}


def _tile_pixels(x0: int, y0: int, x1: int, y1: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.reshape(-1).astype(np.float64), ys.reshape(-1).astype(np.float64)


def _gaussian_terms(proj: _Projection, idx: np.ndarray, px: np.ndarray, py: np.ndarray):
    dx = px[None, :] - proj.mean2d[idx, 0][:, None]
    dy = py[None, :] - proj.mean2d[idx, 1][:, None]
    a, b, c = (proj.conic[idx, k][:, None] for k in range(3))
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    return dx, dy, np.exp(power)


def _exclusive_cumprod(one_minus: np.ndarray) -> np.ndarray:
    out = np.ones_like(one_minus)
    if len(one_minus) > 1:
        out[1:] = np.cumprod(one_minus[:-1], axis=0)
    return out


def _composite_tile(
    proj: _Projection, settings: RasterSettings, key: tuple[int, int], idx: np.ndarray, K: Intrinsics
) -> tuple[_TileState, np.ndarray, np.ndarray]:
    tile = settings.tile_size
    x0, y0 = key[0] * tile, key[1] * tile
    x1, y1 = min(x0 + tile, K.width), min(y0 + tile, K.height)
    px, py = _tile_pixels(x0, y0, x1, y1)
    _, _, g = _gaussian_terms(proj, idx, px, py)
    raw = proj.opacity[idx][:, None] * g
    alpha = np.minimum(settings.alpha_max, raw)
    skipped = alpha < settings.alpha_min
    alpha[skipped] = 0.0

    t_before = _exclusive_cumprod(1.0 - alpha)
    stop = t_before * (1.0 - alpha) < settings.transmittance_min
    included = np.cumsum(stop, axis=0) == 0
    alpha = np.where(included, alpha, 0.0)
    t_before = _exclusive_cumprod(1.0 - alpha)

    weights = alpha * t_before
    rgb = weights.T @ proj.color[idx]
    final_t = t_before[-1] * (1.0 - alpha[-1])
    raw_ok = included & ~skipped & (raw <= settings.alpha_max)
    state = _TileState(x0, y0, x1, y1, idx, alpha, raw_ok)
    return state, rgb.reshape(y1 - y0, x1 - x0, 3), final_t.reshape(y1 - y0, x1 - x0)


def _map_tiles(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Public API — forward
# ---------------------------------------------------------------------------


def render(
    primitives: Sequence[HyperPrimitive] | GaussianBatch,
    pose: Pose,
    K: Intrinsics,
    settings: RasterSettings | None = None,
    primitive_ids: Sequence[int] | None = None,
    color_override: np.ndarray | None = None,
) -> RenderOutput:
    """Alpha-composite the primitives seen from ``pose`` into an H×W×3 image."""
    settings = settings or RasterSettings()
    batch = (
        primitives if isinstance(primitives, GaussianBatch)
        else GaussianBatch.from_primitives(list(primitives), primitive_ids)
    )
    proj = _project_batch(batch, pose, K, settings, color_override)
    image = np.zeros((K.height, K.width, 3))
    final_t = np.ones((K.height, K.width))
    bins = _bin_tiles(proj, K, settings.tile_size) if len(batch) else {}

    results = _map_tiles(
        lambda kv: _composite_tile(proj, settings, kv[0], kv[1], K),
        list(bins.items()),
        settings.workers,
    )
    tiles = []
    for state, rgb, t in results:
        image[state.y0:state.y1, state.x0:state.x1] = rgb
        final_t[state.y0:state.y1, state.x0:state.x1] = t
        tiles.append(state)

    return RenderOutput(
        image=image,
        final_transmittance=final_t,
        tiles=tiles,
        visible_count=int(proj.valid.sum()),
        pose=pose,
        intrinsics=K,
        settings=settings,
        batch=batch,
        projection=proj,
        fingerprint=batch.fingerprint(),
        color_override=color_override is not None,
    )


def composite_from_cache(out: RenderOutput) -> np.ndarray:
    """Recompute the image from the cached per-tile α lists (Σ cᵢ·αᵢ·Tᵢ)."""
    image = np.zeros_like(out.image)
    for tile in out.tiles:
        t_before = _exclusive_cumprod(1.0 - tile.alpha)
        rgb = (tile.alpha * t_before).T @ out.projection.color[tile.contributors]
        image[tile.y0:tile.y1, tile.x0:tile.x1] = rgb.reshape(tile.y1 - tile.y0, tile.x1 - tile.x0, 3)
    return image


# ---------------------------------------------------------------------------
# Public API — backward
# ---------------------------------------------------------------------------


def _tile_backward(proj: _Projection, tile: _TileState, dl_dimg: np.ndarray):
    idx = tile.contributors
    px, py = _tile_pixels(tile.x0, tile.y0, tile.x1, tile.y1)
    dl_dc = dl_dimg[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 3)       # P×3
    alpha = tile.alpha
    t_before = _exclusive_cumprod(1.0 - alpha)
    weights = alpha * t_before                                              # K×P

    grad_color = weights @ dl_dc                                            # K×3
    c_dot = proj.color[idx] @ dl_dc.T                                       # K×P
    contrib = weights * c_dot
    after = np.zeros_like(contrib)
    if len(idx) > 1:
        after[:-1] = np.cumsum(contrib[::-1], axis=0)[::-1][1:]
    dl_dalpha = t_before * c_dot - after / (1.0 - alpha)

    dx, dy, g = _gaussian_terms(proj, idx, px, py)
    dl_draw = np.where(tile.raw_ok, dl_dalpha, 0.0)
    grad_opacity = np.sum(dl_draw * g, axis=1)
    dl_dq = dl_draw * proj.opacity[idx][:, None] * (-0.5 * g)
    a, b, c = (proj.conic[idx, k][:, None] for k in range(3))
    grad_conic = np.stack([
        np.sum(dl_dq * dx * dx, axis=1),
        np.sum(dl_dq * 2.0 * dx * dy, axis=1),
        np.sum(dl_dq * dy * dy, axis=1),
    ], axis=1)
    grad_mean = -np.stack([
        np.sum(dl_dq * (2.0 * a * dx + 2.0 * b * dy), axis=1),
        np.sum(dl_dq * (2.0 * b * dx + 2.0 * c * dy), axis=1),
    ], axis=1)
    return idx, grad_color, grad_opacity, grad_conic, grad_mean


def _quat_backward(qn: np.ndarray, norm: np.ndarray, dR: np.ndarray) -> np.ndarray:
    w, x, y, z = (qn[:, k] for k in range(4))
    G = dR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    g_hat = np.stack([gw, gx, gy, gz], axis=1)
    radial = np.sum(g_hat * qn, axis=1, keepdims=True)
    return (g_hat - radial * qn) / norm[:, None]


def render_backward(
    out: RenderOutput,
    dl_dimage: np.ndarray,
    primitives: Sequence[HyperPrimitive] | GaussianBatch,
    primitive_ids: Sequence[int] | None = None,
    accumulate: bool = True,
) -> RenderGradients:
    """Exact gradients of a scalar loss through ``render`` to every primitive parameter.

    With ``accumulate`` the NDC screen-gradient norm of every rendered primitive
    is added to its ``grad_accum`` (and ``grad_count`` incremented).
    """
    batch = (
        primitives if isinstance(primitives, GaussianBatch)
        else GaussianBatch.from_primitives(list(primitives), primitive_ids)
    )
    if len(batch) != len(out.batch) or batch.fingerprint() != out.fingerprint:
        raise StaleRenderState("primitives changed between render and render_backward")
    K, pose, proj = out.intrinsics, out.pose, out.projection
    dl_dimage = np.asarray(dl_dimage, dtype=np.float64)
    n = len(batch)

    g_color = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_conic = np.zeros((n, 3))
    g_mean = np.zeros((n, 2))
    partials = _map_tiles(lambda t: _tile_backward(proj, t, dl_dimage), out.tiles, out.settings.workers)
    for idx, gc, go, gq, gm in partials:
        np.add.at(g_color, idx, gc)
        np.add.at(g_opacity, idx, go)
        np.add.at(g_conic, idx, gq)
        np.add.at(g_mean, idx, gm)

    # conic (a, b, c) = inverse of cov2d (A, B, C)
    A, B, C = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    det2 = (A * C - B * B) ** 2
    ga, gb, gc_ = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    det = A * C - B * B
    gA = (ga * (-C * C) + gb * (B * C) + gc_ * (-B * B)) / det2
    gB = (ga * (2 * B * C) + gb * (-det - 2 * B * B) + gc_ * (2 * A * B)) / det2
    gC = (ga * (-B * B) + gb * (A * B) + gc_ * (-A * A)) / det2
    G2 = np.zeros((n, 2, 2))
    G2[:, 0, 0] = gA
    G2[:, 0, 1] = G2[:, 1, 0] = 0.5 * gB
    G2[:, 1, 1] = gC

    T = proj.T
    Tt = np.transpose(T, (0, 2, 1))
    g_cov3d = Tt @ G2 @ T
    g_T = 2.0 * G2 @ T @ proj.cov3d
    W = pose.R
    g_J = g_T @ W.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    zs = np.where(proj.valid, z, 1.0)
    fx, fy = K.fx, K.fy
    g_pc = np.zeros((n, 3))
    g_pc[:, 0] = g_mean[:, 0] * fx / zs + g_J[:, 0, 2] * (-fx / zs**2)
    g_pc[:, 1] = g_mean[:, 1] * fy / zs + g_J[:, 1, 2] * (-fy / zs**2)
    g_pc[:, 2] = (
        g_mean[:, 0] * (-fx * x / zs**2)
        + g_mean[:, 1] * (-fy * y / zs**2)
        + g_J[:, 0, 0] * (-fx / zs**2)
        + g_J[:, 0, 2] * (2 * fx * x / zs**3)
        + g_J[:, 1, 1] * (-fy / zs**2)
        + g_J[:, 1, 2] * (2 * fy * y / zs**3)
    )
    g_pos = g_pc @ W

    g_sh = np.zeros((n, N_COEFFS, 3))
    if not out.color_override:
        g_raw = np.where(proj.color_raw > 0.0, g_color, 0.0)
        degree = out.settings.sh_degree
        basis = sh_basis(proj.dirs, degree) if n else np.zeros((0, N_COEFFS))
        g_sh = basis[:, :, None] * g_raw[:, None, :]
        dbasis = sh_basis_jacobian(proj.dirs, degree) if n else np.zeros((0, N_COEFFS, 3))
        g_dir = np.einsum("nc,nkc,nkd->nd", g_raw, batch.sh, dbasis)
        radial = np.sum(g_dir * proj.dirs, axis=1, keepdims=True)
        dist = np.where(proj.view_dist > 0, proj.view_dist, 1.0)[:, None]
        g_pos += (g_dir - radial * proj.dirs) / dist

    scales = np.exp(batch.log_scales)
    M = proj.rot * scales[:, None, :]
    g_M = 2.0 * g_cov3d @ M
    g_log_scale = np.sum(g_M * proj.rot, axis=1) * scales
    g_R = g_M * scales[:, None, :]
    _, qn, qnorm = _quat_matrices(batch.rotations) if n else (None, np.zeros((0, 4)), np.zeros(0))
    g_rot = _quat_backward(qn, qnorm, g_R) if n else np.zeros((0, 4))

    g_logit = g_opacity * proj.opacity * (1.0 - proj.opacity)

    visible = np.zeros(n, dtype=bool)
    for tile in out.tiles:
        visible[tile.contributors] = True
    invalid = ~visible
    for arr in (g_pos, g_rot, g_log_scale, g_sh, g_mean):
        arr[invalid] = 0.0
    g_logit[invalid] = 0.0

    ndc = g_mean * np.array([0.5 * K.width, 0.5 * K.height])
    screen_norm = np.linalg.norm(ndc, axis=1)

    if accumulate and not isinstance(primitives, GaussianBatch):
        for i, prim in enumerate(primitives):
            if visible[i]:
                prim.grad_accum += float(screen_norm[i])
                prim.grad_count += 1

    return RenderGradients(
        ids=batch.ids.copy(),
        position=g_pos,
        rotation=g_rot,
        log_scale=g_log_scale,
        opacity_logit=g_logit,
        sh=g_sh,
        mean2d=g_mean,
        screen_grad_norm=screen_norm,
        visible=visible,
    )
