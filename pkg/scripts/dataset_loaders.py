#!/usr/bin/env python3
"""Dataset Loaders — TUM RGB-D, Replica and synthetic sequences.

TUM layout (also produced by ``hyperslam synth``):
  rgb.txt           "timestamp path" per line, '#' comments
  depth.txt         optional, same format, 16-bit PNGs (metres × depth_scale)
  groundtruth.txt   optional, "timestamp tx ty tz qx qy qz qw" (camera-to-world)
  camera.yaml       optional intrinsics (fx, fy, cx, cy, width, height, depth_scale);
                    otherwise the freiburg1/2/3 calibration picked from the
                    directory name

Replica layout:
  results/frameNNNNNN.jpg, results/depthNNNNNN.png, traj.txt with one
  row-major 4×4 camera-to-world matrix per frame; camera.yaml optional.

Depth and ground truth are associated to colour frames by nearest
timestamp within ``max_dt`` (one-to-one).  Ground-truth poses are converted
to the world-to-camera convention used everywhere else.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
import yaml

from hyper_core import Intrinsics, Pose, TIMESTAMP_MAX_DT, associate_timestamps, quat_normalize

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

TUM_DEPTH_SCALE: float = 5000.0
REPLICA_DEPTH_SCALE: float = 6553.5
CAMERA_FILENAME: str = "camera.yaml"

_TUM_CAMERAS: dict[str, tuple[float, float, float, float]] = {
    "freiburg1": (517.3, 516.5, 318.6, 255.3),
    "freiburg2": (520.9, 521.0, 325.1, 249.7),
    "freiburg3": (535.4, 539.2, 320.1, 247.6),
}
_TUM_SIZE: tuple[int, int] = (640, 480)
_REPLICA_CAMERA: tuple[float, float, float, float, int, int] = (600.0, 600.0, 599.5, 339.5, 1200, 680)
_FRAME_INDEX = re.compile(r"(\d+)")


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class MissingManifest(FileNotFoundError):
    """Raised when a dataset directory lacks its index or trajectory file."""


class EmptySequence(ValueError):
    """Raised when a dataset yields no frames."""


class MalformedPose(ValueError):
    """Raised when a trajectory row cannot be parsed into a finite pose."""


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class SequenceFrame:
    """One input frame; images are decoded lazily from their paths."""

    timestamp: float
    color_path: Path | None = None
    depth_path: Path | None = None
    gt_pose: Pose | None = None
    color: np.ndarray | None = None
    depth: np.ndarray | None = None

    def load_color(self) -> np.ndarray:
        """H×W×3 float RGB in [0, 1]."""
        if self.color is not None:
            return self.color
        img = cv2.imread(str(self.color_path), cv2.IMREAD_COLOR)
        if img is None:
            raise OSError(f"cannot decode colour image {self.color_path}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0

    def load_depth(self, depth_scale: float) -> np.ndarray | None:
        """H×W metric depth (0 where invalid), or None without a depth image."""
        if self.depth is not None:
            return self.depth
        if self.depth_path is None:
            return None
        raw = cv2.imread(str(self.depth_path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise OSError(f"cannot decode depth image {self.depth_path}")
        return raw.astype(np.float64) / depth_scale


@dataclass
class Sequence:
    name: str
    frames: list[SequenceFrame]
    intrinsics: Intrinsics


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _read_index(path: Path) -> list[list[str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.split())
    return rows


def _read_timed_paths(path: Path) -> tuple[np.ndarray, list[Path]]:
    stamps, paths = [], []
    for row in _read_index(path):
        if len(row) < 2:
            continue
        stamps.append(float(row[0]))
        paths.append(path.parent / row[1])
    order = np.argsort(stamps, kind="stable")
    stamps_arr = np.asarray(stamps, dtype=np.float64)[order]
    paths = [paths[i] for i in order]
    keep = np.ones(len(stamps_arr), dtype=bool)
    keep[1:] = np.diff(stamps_arr) > 0
    return stamps_arr[keep], [p for p, k in zip(paths, keep) if k]


def tum_pose(values: list[float]) -> Pose:
    """``tx ty tz qx qy qz qw`` camera-to-world → world-to-camera Pose."""
    if len(values) != 7 or not np.all(np.isfinite(values)):
        raise MalformedPose(f"expected 7 finite values, got {values!r}")
    tx, ty, tz, qx, qy, qz, qw = values
    q = np.array([qw, qx, qy, qz], dtype=np.float64)
    if np.linalg.norm(q) == 0:
        raise MalformedPose("zero quaternion")
    return Pose(quat_normalize(q), np.array([tx, ty, tz])).inverse()


def read_tum_trajectory(path: Path) -> list[tuple[float, Pose]]:
    out = []
    for row in _read_index(path):
        try:
            values = [float(x) for x in row]
        except ValueError as exc:
            raise MalformedPose(f"{path}: non-numeric row {row!r}") from exc
        if len(values) != 8:
            raise MalformedPose(f"{path}: expected 8 columns, got {len(values)}")
        out.append((values[0], tum_pose(values[1:])))
    return out


def load_camera(path: Path, default_depth_scale: float | None = None) -> Intrinsics:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise MalformedPose(f"cannot parse {path}: {exc}") from exc
    missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if k not in data]
    if missing:
        raise MissingManifest(f"{path} lacks {', '.join(missing)}")
    return Intrinsics(
        fx=float(data["fx"]), fy=float(data["fy"]), cx=float(data["cx"]), cy=float(data["cy"]),
        width=int(data["width"]), height=int(data["height"]),
        depth_scale=float(data["depth_scale"]) if data.get("depth_scale") else default_depth_scale,
    )


def write_camera(path: Path, K: Intrinsics) -> None:
    data = {
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "width": K.width, "height": K.height, "depth_scale": K.depth_scale,
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def _tum_intrinsics(root: Path, depth_scale: float) -> Intrinsics:
    if (root / CAMERA_FILENAME).is_file():
        return load_camera(root / CAMERA_FILENAME, depth_scale)
    name = root.resolve().name.lower()
    for key, (fx, fy, cx, cy) in _TUM_CAMERAS.items():
        if key in name:
            return Intrinsics(fx, fy, cx, cy, *_TUM_SIZE, depth_scale=depth_scale)
    return Intrinsics(*_TUM_CAMERAS["freiburg1"], *_TUM_SIZE, depth_scale=depth_scale)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def load_tum_sequence(
    root: str | Path,
    max_dt: float = TIMESTAMP_MAX_DT,
) -> list[SequenceFrame]:
    """Frames of a TUM-format directory with depth and ground truth associated."""
    root = Path(root)
    rgb_txt = root / "rgb.txt"
    if not rgb_txt.is_file():
        raise MissingManifest(f"{rgb_txt} not found")
    stamps, color_paths = _read_timed_paths(rgb_txt)
    if len(stamps) == 0:
        raise EmptySequence(f"{rgb_txt} lists no frames")
    frames = [SequenceFrame(float(t), color_path=p) for t, p in zip(stamps, color_paths)]

    if (root / "depth.txt").is_file():
        d_stamps, d_paths = _read_timed_paths(root / "depth.txt")
        for i, j in associate_timestamps(stamps, d_stamps, max_dt):
            frames[i].depth_path = d_paths[j]
    if (root / "groundtruth.txt").is_file():
        gt = read_tum_trajectory(root / "groundtruth.txt")
        for i, j in associate_timestamps(stamps, [t for t, _ in gt], max_dt):
            frames[i].gt_pose = gt[j][1]
    return frames


def load_replica_sequence(root: str | Path) -> list[SequenceFrame]:
    """Frames of a Replica directory; ``traj.txt`` supplies one pose per frame."""
    root = Path(root)
    results = root / "results"
    traj = root / "traj.txt"
    if not results.is_dir():
        raise MissingManifest(f"{results} not found")
    if not traj.is_file():
        raise MissingManifest(f"{traj} not found")

    def index_of(p: Path) -> int:
        return int(_FRAME_INDEX.findall(p.stem)[-1])

    colors = sorted(results.glob("frame*.jpg"), key=index_of) or sorted(results.glob("frame*.png"), key=index_of)
    depths = {index_of(p): p for p in results.glob("depth*.png")}
    if not colors:
        raise EmptySequence(f"{results} has no frame images")

    poses = []
    for line_no, row in enumerate(_read_index(traj), start=1):
        try:
            values = np.array([float(x) for x in row], dtype=np.float64)
        except ValueError as exc:
            raise MalformedPose(f"{traj}:{line_no}: non-numeric value") from exc
        if values.size != 16 or not np.all(np.isfinite(values)):
            raise MalformedPose(f"{traj}:{line_no}: expected 16 finite values, got {values.size}")
        T_wc = values.reshape(4, 4)
        poses.append(Pose.from_matrix(np.linalg.inv(T_wc)))
    if len(poses) < len(colors):
        raise MalformedPose(f"{traj} has {len(poses)} poses for {len(colors)} frames")

    return [
        SequenceFrame(
            timestamp=float(i),
            color_path=path,
            depth_path=depths.get(index_of(path)),
            gt_pose=poses[i],
        )
        for i, path in enumerate(colors)
    ]


def load_synthetic_sequence(root: str | Path, max_dt: float = TIMESTAMP_MAX_DT) -> list[SequenceFrame]:
    """Synthetic fixtures are written in the TUM layout with a camera.yaml."""
    root = Path(root)
    if not (root / CAMERA_FILENAME).is_file():
        raise MissingManifest(f"{root / CAMERA_FILENAME} not found")
    return load_tum_sequence(root, max_dt=max_dt)


def load_sequence(
    root: str | Path,
    fmt: str,
    depth_scale: float | None = None,
    max_dt: float = TIMESTAMP_MAX_DT,
) -> Sequence:
    """Frames plus intrinsics for ``fmt`` in {tum, replica, synthetic}."""
    root = Path(root)
    if fmt == "tum":
        scale = depth_scale or TUM_DEPTH_SCALE
        frames = load_tum_sequence(root, max_dt)
        K = _tum_intrinsics(root, scale)
    elif fmt == "synthetic":
        frames = load_synthetic_sequence(root, max_dt)
        K = load_camera(root / CAMERA_FILENAME, depth_scale or TUM_DEPTH_SCALE)
    elif fmt == "replica":
        scale = depth_scale or REPLICA_DEPTH_SCALE
        frames = load_replica_sequence(root)
        if (root / CAMERA_FILENAME).is_file():
            K = load_camera(root / CAMERA_FILENAME, scale)
        else:
            fx, fy, cx, cy, w, h = _REPLICA_CAMERA
            K = Intrinsics(fx, fy, cx, cy, w, h, depth_scale=scale)
    else:
        raise ValueError(f"format must be tum, replica or synthetic (got {fmt!r})")
    if depth_scale:
        K = replace(K, depth_scale=float(depth_scale))
    return Sequence(root.name, frames, K)
