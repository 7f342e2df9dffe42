#!/usr/bin/env python3
"""Hyper Core — domain types, the shared hyper-primitive map and camera math.

Every other HyperSLAM module builds on the types declared here:

  Pose          rigid world-to-camera transform, p_cam = R·p_world + t
  Sim3          similarity transform (rotation, translation, uniform scale)
  Intrinsics    ideal pinhole camera (rectified images)
  HyperPrimitive  one 3D Gaussian plus an optional 256-bit binary descriptor
  Keyframe      a selected frame with keypoints, descriptors and observations
  HyperMap      primitives + keyframes + covisibility graph, with one
                reader/writer lock per region

Conventions:
  Quaternions are stored (w, x, y, z).  z points forward, the image origin is
  top-left, u grows rightwards and v downwards.  Primitive scale is stored as
  log-scale and opacity as a logit.

Geometry operations:
  project, backproject, triangulate, umeyama_align (plus the array variants
  project_points / umeyama used by the optimizers and the evaluator).
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy.spatial.transform import Rotation

from sh_basis import rgb_to_sh_dc

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

Z_MIN: float = 1e-6                    # metres; points at or behind this depth are invalid
PARALLAX_MIN_DEG: float = 1.0          # minimum ray angle accepted by triangulate
TRIANGULATION_MAX_REPROJ_PX: float = 2.0
COVISIBILITY_MIN_SHARED: int = 15
TIMESTAMP_MAX_DT: float = 0.02         # seconds, trajectory association window
SH_COEFFS_PER_CHANNEL: int = 16
DESCRIPTOR_BYTES: int = 32             # 256 bits

_QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class PointBehindCamera(ValueError):
    """Raised when a point projects with depth at or below ``Z_MIN``."""


class InvalidDepth(ValueError):
    """Raised when a back-projection depth is non-positive or non-finite."""


class DegenerateParallax(RuntimeError):
    """Raised when two viewing rays are closer than the parallax threshold."""


class CheiralityViolation(RuntimeError):
    """Raised when a triangulated point lands behind one of the cameras."""


class HighReprojectionError(RuntimeError):
    """Raised when a triangulated point reprojects farther than the tolerance."""


class TooFewPairs(ValueError):
    """Raised when an alignment has fewer than three associated pairs."""


# ---------------------------------------------------------------------------
# Quaternion / rotation helpers
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return ``q`` scaled to unit norm with a non-negative scalar part."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return quat_normalize(np.array([w, x, y, z]))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * (K @ K)
    )


# ---------------------------------------------------------------------------
# Data classes — transforms and camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform: ``p_cam = R·p_world + t``."""

    rotation: np.ndarray = field(default_factory=lambda: _QUAT_IDENTITY.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> Pose:
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64).copy())

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        R = self.R
        q = quat_normalize(quat_multiply(self.rotation, other.rotation))
        return Pose(q, R @ other.translation + self.translation)

    def inverse(self) -> Pose:
        Rt = self.R.T
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(quat_normalize(q), -Rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (N×3 or 3) into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def retract(self, xi: np.ndarray) -> Pose:
        """Left-multiplicative SE(3) update ``exp(xi)·self`` with ``xi = (omega, v)``."""
        xi = np.asarray(xi, dtype=np.float64)
        dR = so3_exp(xi[:3])
        dt = _so3_left_jacobian(xi[:3]) @ xi[3:]
        R = dR @ self.R
        return Pose(matrix_to_quat(R), dR @ self.translation + dt)

    def almost_equal(self, other: Pose, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform ``p ↦ s·R·p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: _QUAT_IDENTITY.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive (got {self.scale!r})")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> Sim3:
        return cls()

    @classmethod
    def from_srt(cls, s: float, R: np.ndarray, t: np.ndarray) -> Sim3:
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64).copy(), s)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and bool(np.all(self.translation == 0.0))
            and bool(np.all(self.rotation == _QUAT_IDENTITY))
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.R.T) + self.translation

    def compose(self, other: Sim3) -> Sim3:
        R = self.R
        return Sim3(
            quat_normalize(quat_multiply(self.rotation, other.rotation)),
            self.scale * (R @ other.translation) + self.translation,
            self.scale * other.scale,
        )

    def inverse(self) -> Sim3:
        Rt = self.R.T
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Sim3(quat_normalize(q), -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def as_pose(self) -> Pose:
        """The rigid part; exact when ``scale == 1``."""
        return Pose(self.rotation.copy(), self.translation.copy())

    def correct_pose(self, pose: Pose) -> Pose:
        """Left-compose this similarity onto a camera pose.

        The camera centre moves with the similarity and the camera orientation
        is rotated by it; the result stays rigid (unit scale).
        """
        center = self.apply(pose.camera_center())
        R_cw = pose.R @ self.R.T
        return Pose.from_rt(R_cw, -R_cw @ center)


@dataclass(frozen=True)
class Intrinsics:
    """Ideal pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float | None = None

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive (got {self.fx}, {self.fy})")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> Intrinsics:
        """Intrinsics for an image halved ``level`` times (sizes rounded up)."""
        width, height = self.width, self.height
        for _ in range(level):
            width, height = (width + 1) // 2, (height + 1) // 2
        f = 2.0 ** -level
        return replace(
            self,
            fx=self.fx * f, fy=self.fy * f, cx=self.cx * f, cy=self.cy * f,
            width=width, height=height,
        )


# ---------------------------------------------------------------------------
# Data classes — map elements
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class HyperPrimitive:
    """A 3D Gaussian carrying an optional 256-bit binary descriptor."""

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: _QUAT_IDENTITY.copy())
    log_scale: np.ndarray = field(default_factory=lambda: np.full(3, np.log(0.01)))
    opacity_logit: float = float(np.log(0.1 / 0.9))
    sh: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS_PER_CHANNEL, 3)))
    descriptor: np.ndarray | None = None
    temporary: bool = False
    grad_accum: float = 0.0
    grad_count: int = 0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(SH_COEFFS_PER_CHANNEL, 3)
        if self.descriptor is not None:
            self.descriptor = np.asarray(self.descriptor, dtype=np.uint8).reshape(DESCRIPTOR_BYTES)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def copy(self) -> HyperPrimitive:
        return HyperPrimitive(
            position=self.position.copy(),
            rotation=self.rotation.copy(),
            log_scale=self.log_scale.copy(),
            opacity_logit=self.opacity_logit,
            sh=self.sh.copy(),
            descriptor=None if self.descriptor is None else self.descriptor.copy(),
            temporary=self.temporary,
            grad_accum=self.grad_accum,
            grad_count=self.grad_count,
        )


INITIAL_OPACITY: float = 0.1


def sample_color(image: np.ndarray, u: float, v: float) -> np.ndarray:
    """RGB at the nearest pixel to (u, v); grey images are broadcast to 3 channels."""
    h, w = image.shape[:2]
    col = int(np.clip(round(u), 0, w - 1))
    row = int(np.clip(round(v), 0, h - 1))
    px = np.asarray(image[row, col], dtype=np.float64)
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        px = px / 255.0
    return np.repeat(px, 3) if px.ndim == 0 else px[:3]


def make_primitive(
    position: np.ndarray,
    depth: float,
    focal: float,
    rgb: np.ndarray,
    descriptor: np.ndarray | None = None,
    temporary: bool = False,
) -> HyperPrimitive:
    """Fresh primitive with a screen-space-constant isotropic footprint.

    Scale is ``depth / focal`` (one pixel at creation distance), opacity 0.1
    and the degree-0 SH terms reproduce ``rgb``; higher bands start at zero.
    """
    sh = np.zeros((SH_COEFFS_PER_CHANNEL, 3))
    sh[0] = rgb_to_sh_dc(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0))
    return HyperPrimitive(
        position=np.asarray(position, dtype=np.float64).copy(),
        log_scale=np.full(3, np.log(depth / focal)),
        opacity_logit=float(np.log(INITIAL_OPACITY / (1.0 - INITIAL_OPACITY))),
        sh=sh,
        descriptor=descriptor,
        temporary=temporary,
    )


@dataclass(eq=False)
class Keyframe:
    """A selected frame.  ``keypoints`` rows are (u, v, octave)."""

    id: int
    timestamp: float
    pose: Pose
    intrinsics: Intrinsics
    image: np.ndarray
    depth: np.ndarray | None = None
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_BYTES), np.uint8))
    observations: dict[int, int] = field(default_factory=dict)
    pyramid_cache: list[np.ndarray] | None = None

    @property
    def n_keypoints(self) -> int:
        return int(len(self.keypoints))

    def inactive_keypoints(self) -> np.ndarray:
        """Indices of keypoints without an associated primitive."""
        mask = np.ones(self.n_keypoints, dtype=bool)
        if self.observations:
            mask[list(self.observations.keys())] = False
        return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# Reader/writer lock
# ---------------------------------------------------------------------------


class RWLock:
    """Many concurrent readers or one (re-entrant) writer."""

    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer: int | None = None
        self._writer_depth = 0

    @contextmanager
    def read(self) -> Iterator[None]:
        me = threading.get_ident()
        with self._cond:
            if self._writer == me:
                self._writer_depth += 1
                owned = True
            else:
                while self._writer is not None:
                    self._cond.wait()
                self._readers += 1
                owned = False
        try:
            yield
        finally:
            with self._cond:
                if owned:
                    self._writer_depth -= 1
                else:
                    self._readers -= 1
                    if self._readers == 0:
                        self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        me = threading.get_ident()
        with self._cond:
            if self._writer == me:
                self._writer_depth += 1
            else:
                while self._writer is not None or self._readers > 0:
                    self._cond.wait()
                self._writer = me
                self._writer_depth = 1
        try:
            yield
        finally:
            with self._cond:
                self._writer_depth -= 1
                if self._writer_depth == 0:
                    self._writer = None
                    self._cond.notify_all()


# ---------------------------------------------------------------------------
# HyperMap
# ---------------------------------------------------------------------------


class HyperMap:
    """Shared container of primitives, keyframes and the covisibility graph.

    Lock contract: ``primitives_lock`` guards ``primitives`` and the
    primitive→observer index; ``keyframes_lock`` guards ``keyframes``,
    keyframe observations and covisibility.  Writers touching both regions
    take ``keyframes_lock`` first.
    """

    def __init__(self, covisibility_min_shared: int = COVISIBILITY_MIN_SHARED) -> None:
        self.primitives: dict[int, HyperPrimitive] = {}
        self.keyframes: dict[int, Keyframe] = {}
        self.covisibility_min_shared = covisibility_min_shared
        self.next_primitive_id = 0
        self.next_keyframe_id = 0
        self.primitives_lock = RWLock()
        self.keyframes_lock = RWLock()
        self._observers: dict[int, dict[int, int]] = {}
        self._shared: dict[int, Counter[int]] = {}
        self._loop_links: dict[int, dict[int, int]] = {}

    # -- primitives ---------------------------------------------------------

    def add_primitive(self, prim: HyperPrimitive) -> int:
        with self.primitives_lock.write():
            pid = self.next_primitive_id
            self.next_primitive_id += 1
            self.primitives[pid] = prim
            self._observers[pid] = {}
        return pid

    def remove_primitive(self, pid: int) -> None:
        with self.keyframes_lock.write(), self.primitives_lock.write():
            for kf_id, kp_idx in list(self._observers.get(pid, {}).items()):
                self._drop_observation(kf_id, kp_idx, pid)
            self._observers.pop(pid, None)
            self.primitives.pop(pid, None)

    def observers(self, pid: int) -> dict[int, int]:
        """Keyframe id → keypoint index for every keyframe observing ``pid``."""
        with self.primitives_lock.read():
            return dict(self._observers.get(pid, {}))

    # -- keyframes ----------------------------------------------------------

    def add_keyframe(self, kf: Keyframe) -> int:
        """Insert ``kf`` under a fresh monotone id (overwriting ``kf.id``)."""
        with self.keyframes_lock.write():
            kf.id = self.next_keyframe_id
            self.next_keyframe_id += 1
            observations, kf.observations = kf.observations, {}
            self.keyframes[kf.id] = kf
            self._shared[kf.id] = Counter()
            for kp_idx, pid in observations.items():
                self.add_observation(kf.id, kp_idx, pid)
        return kf.id

    def first_keyframe_id(self) -> int | None:
        with self.keyframes_lock.read():
            return min(self.keyframes) if self.keyframes else None

    def add_observation(self, kf_id: int, kp_idx: int, pid: int) -> None:
        with self.keyframes_lock.write(), self.primitives_lock.write():
            kf = self.keyframes[kf_id]
            if not 0 <= kp_idx < kf.n_keypoints:
                raise IndexError(f"keypoint {kp_idx} out of range for keyframe {kf_id}")
            if pid not in self.primitives:
                raise KeyError(f"unknown primitive {pid}")
            previous = kf.observations.get(kp_idx)
            if previous == pid:
                return
            if previous is not None:
                self._drop_observation(kf_id, kp_idx, previous)
            observers = self._observers[pid]
            if kf_id in observers:
                self._drop_observation(kf_id, observers[kf_id], pid)
            for other in observers:
                self._shared[kf_id][other] += 1
                self._shared[other][kf_id] += 1
            observers[kf_id] = kp_idx
            kf.observations[kp_idx] = pid

    def remove_observation(self, kf_id: int, kp_idx: int) -> None:
        with self.keyframes_lock.write(), self.primitives_lock.write():
            pid = self.keyframes[kf_id].observations.get(kp_idx)
            if pid is not None:
                self._drop_observation(kf_id, kp_idx, pid)

    def _drop_observation(self, kf_id: int, kp_idx: int, pid: int) -> None:
        observers = self._observers.get(pid, {})
        if observers.get(kf_id) != kp_idx:
            return
        del observers[kf_id]
        self.keyframes[kf_id].observations.pop(kp_idx, None)
        for other in observers:
            for a, b in ((kf_id, other), (other, kf_id)):
                self._shared[a][b] -= 1
                if self._shared[a][b] <= 0:
                    del self._shared[a][b]

    # -- covisibility -------------------------------------------------------

    def shared_count(self, a: int, b: int) -> int:
        """Exact number of primitives observed by both keyframes."""
        with self.keyframes_lock.read():
            return int(self._shared.get(a, Counter()).get(b, 0))

    def covisibility(self) -> dict[int, dict[int, int]]:
        """Edges with at least ``covisibility_min_shared`` common primitives.

        Counts come from the observation index only; loop links live in
        ``loop_edges``.
        """
        with self.keyframes_lock.read():
            theta = self.covisibility_min_shared
            return {
                kf: {other: n for other, n in counts.items() if n >= theta}
                for kf, counts in self._shared.items()
            }

    def loop_edges(self) -> dict[int, dict[int, int]]:
        """Loop links as keyframe id → {other id: link weight}."""
        with self.keyframes_lock.read():
            return {kf: dict(links) for kf, links in self._loop_links.items()}

    def covisible_keyframes(self, kf_id: int, min_shared: int | None = None) -> list[int]:
        """Neighbours of ``kf_id`` sorted by descending weight, then id.

        A loop-linked neighbour weighs the larger of its link weight and its
        shared count.
        """
        theta = self.covisibility_min_shared if min_shared is None else min_shared
        with self.keyframes_lock.read():
            weights = dict(self._shared.get(kf_id, Counter()))
            for other, w in self._loop_links.get(kf_id, {}).items():
                weights[other] = max(w, weights.get(other, 0))
            edges = [(n, other) for other, n in weights.items() if n >= theta]
        return [other for _n, other in sorted(edges, key=lambda e: (-e[0], e[1]))]

    def link_keyframes(self, a: int, b: int, weight: int) -> None:
        """Record a loop edge between ``a`` and ``b``; shared counts are untouched."""
        with self.keyframes_lock.write():
            w = max(weight, self._loop_links.get(a, {}).get(b, 0))
            self._loop_links.setdefault(a, {})[b] = w
            self._loop_links.setdefault(b, {})[a] = w

    def recompute_covisibility(self) -> dict[int, dict[int, int]]:
        """Covisibility rebuilt from scratch out of the observation index."""
        with self.keyframes_lock.read(), self.primitives_lock.read():
            counts: dict[int, Counter[int]] = {kf: Counter() for kf in self.keyframes}
            for observers in self._observers.values():
                kfs = sorted(observers)
                for i, a in enumerate(kfs):
                    for b in kfs[i + 1:]:
                        counts[a][b] += 1
                        counts[b][a] += 1
        theta = self.covisibility_min_shared
        return {
            kf: {other: n for other, n in c.items() if n >= theta}
            for kf, c in counts.items()
        }

    # -- snapshots ----------------------------------------------------------

    def primitive_items(self) -> list[tuple[int, HyperPrimitive]]:
        with self.primitives_lock.read():
            return sorted(self.primitives.items())

    def scene_extent(self) -> float:
        """Radius of the keyframe camera centres around their mean (min 1 m)."""
        with self.keyframes_lock.read():
            centers = np.array([kf.pose.camera_center() for kf in self.keyframes.values()])
        if len(centers) < 2:
            return 1.0
        radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
        return max(1.1 * radius, 1.0)


# ---------------------------------------------------------------------------
# Projection geometry
# ---------------------------------------------------------------------------


def project(p: np.ndarray, pose: Pose, K: Intrinsics, z_min: float = Z_MIN) -> tuple[float, float, float]:
    """Project a world point to pixel coordinates and camera depth."""
    x, y, z = pose.transform(np.asarray(p, dtype=np.float64))
    if not z > z_min:
        raise PointBehindCamera(f"point at camera depth {z:.3g} m (z_min={z_min:g})")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, float(z)


def project_points(points: np.ndarray, pose: Pose, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (uv N×2, depth N).  No depth check."""
    pc = pose.transform(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    return uv, z


def backproject(u: float, v: float, depth: float, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Lift a pixel with metric depth to a world point."""
    if not (np.isfinite(depth) and depth > 0):
        raise InvalidDepth(f"depth must be positive and finite (got {depth!r})")
    p_cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.R.T @ (p_cam - pose.translation)


def backproject_many(uv: np.ndarray, depth: np.ndarray, pose: Pose, K: Intrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    p_cam = np.stack([(uv[:, 0] - K.cx) / K.fx * d, (uv[:, 1] - K.cy) / K.fy * d, d], axis=1)
    return (p_cam - pose.translation) @ pose.R


def _bearing_world(uv: tuple[float, float], pose: Pose, K: Intrinsics) -> np.ndarray:
    ray = np.array([(uv[0] - K.cx) / K.fx, (uv[1] - K.cy) / K.fy, 1.0])
    ray = pose.R.T @ ray
    return ray / np.linalg.norm(ray)


def triangulate(
    obs_a: tuple[float, float],
    pose_a: Pose,
    obs_b: tuple[float, float],
    pose_b: Pose,
    K: Intrinsics,
    min_parallax_deg: float = PARALLAX_MIN_DEG,
    max_reproj_px: float = TRIANGULATION_MAX_REPROJ_PX,
) -> np.ndarray:
    """Linear (DLT) two-view triangulation with parallax/cheirality checks."""
    ray_a = _bearing_world(obs_a, pose_a, K)
    ray_b = _bearing_world(obs_b, pose_b, K)
    cos_angle = float(np.clip(ray_a @ ray_b, -1.0, 1.0))
    if np.degrees(np.arccos(cos_angle)) < min_parallax_deg:
        raise DegenerateParallax(
            f"ray angle {np.degrees(np.arccos(cos_angle)):.3f} deg below {min_parallax_deg} deg"
        )

    rows = []
    for (u, v), pose in ((obs_a, pose_a), (obs_b, pose_b)):
        P = K.K @ pose.matrix()[:3]
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-15:
        raise DegenerateParallax("triangulated point at infinity")
    point = X[:3] / X[3]

    for uv, pose, label in ((obs_a, pose_a, "a"), (obs_b, pose_b, "b")):
        z = pose.transform(point)[2]
        if z <= Z_MIN:
            raise CheiralityViolation(f"point lies behind camera {label} (z={z:.3g})")
        u, v, _ = project(point, pose, K)
        err = float(np.hypot(u - uv[0], v - uv[1]))
        if err > max_reproj_px:
            raise HighReprojectionError(f"reprojection error {err:.2f}px in view {label}")
    return point


# ---------------------------------------------------------------------------
# Similarity alignment
# ---------------------------------------------------------------------------


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3:
    """Closed-form least-squares similarity mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or len(src) != len(dst):
        raise TooFewPairs(f"umeyama needs >= 3 paired points (got {len(src)}, {len(dst)})")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = float(np.mean(np.sum(xs**2, axis=1)))
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return Sim3.from_srt(s, R, t)


TimedPose = tuple[float, Pose]


def associate_timestamps(
    a: np.ndarray, b: np.ndarray, max_dt: float = TIMESTAMP_MAX_DT
) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp association within ``max_dt``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    candidates = np.argwhere(diff <= max_dt)
    order = np.lexsort((candidates[:, 1], candidates[:, 0], diff[candidates[:, 0], candidates[:, 1]]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for i, j in candidates[order]:
        if i in used_a or j in used_b:
            continue
        used_a.add(int(i))
        used_b.add(int(j))
        pairs.append((int(i), int(j)))
    return sorted(pairs)


def associated_centers(
    est: list[TimedPose], gt: list[TimedPose], max_dt: float = TIMESTAMP_MAX_DT
) -> tuple[np.ndarray, np.ndarray]:
    pairs = associate_timestamps([t for t, _ in est], [t for t, _ in gt], max_dt)
    if len(pairs) < 3:
        raise TooFewPairs(f"need >= 3 associated poses (got {len(pairs)})")
    src = np.array([est[i][1].camera_center() for i, _ in pairs])
    dst = np.array([gt[j][1].camera_center() for _, j in pairs])
    return src, dst


def umeyama_align(
    est: list[TimedPose],
    gt: list[TimedPose],
    with_scale: bool = True,
    max_dt: float = TIMESTAMP_MAX_DT,
) -> Sim3:
    """Similarity aligning the estimated camera centres onto ground truth."""
    src, dst = associated_centers(est, gt, max_dt)
    return umeyama(src, dst, with_scale=with_scale)
