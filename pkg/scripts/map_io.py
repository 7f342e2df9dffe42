#!/usr/bin/env python3
"""Map IO — on-disk formats written by a HyperSLAM run.

map.hpm (little-endian):
  b"HPM1", u64 count, then per primitive
    3×f64 position, 4×f64 rotation (w, x, y, z), 3×f64 log_scale,
    f64 opacity_logit, 48×f32 SH (16 coefficients × RGB, coefficient-major),
    u8 has_descriptor, [32 bytes descriptor]
  An empty map is 12 bytes; a primitive without descriptor takes 281 bytes.

trajectory.txt:
  "timestamp tx ty tz qx qy qz qw" per line, camera-to-world, 9 significant
  digits (TUM convention; read back with dataset_loaders.read_tum_trajectory).

renders/NNNNNN.ppm:
  binary P6, 8-bit RGB.

report.json:
  every RunReport field; the trajectory itself goes to trajectory.txt.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import cv2
import numpy as np

from hyper_core import DESCRIPTOR_BYTES, SH_COEFFS_PER_CHANNEL, HyperMap, HyperPrimitive, Pose

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

HPM_MAGIC: bytes = b"HPM1"
HPM_HEADER_BYTES: int = 12
_SH_VALUES: int = SH_COEFFS_PER_CHANNEL * 3
HPM_RECORD_BYTES: int = 8 * (3 + 4 + 3 + 1) + 4 * _SH_VALUES + 1
MAP_FILENAME: str = "map.hpm"
TRAJECTORY_FILENAME: str = "trajectory.txt"
REPORT_FILENAME: str = "report.json"
RENDERS_DIRNAME: str = "renders"


# ---------------------------------------------------------------------------
# Custom exceptions
# ---------------------------------------------------------------------------


class MapFormatError(ValueError):
    """Raised when a map.hpm buffer is truncated, oversized or has a bad magic."""


# ---------------------------------------------------------------------------
# map.hpm
# ---------------------------------------------------------------------------


def hpm_size(primitives: list[HyperPrimitive]) -> int:
    """Serialized size in bytes; reported as the run's model size."""
    n_desc = sum(p.descriptor is not None for p in primitives)
    return HPM_HEADER_BYTES + len(primitives) * HPM_RECORD_BYTES + n_desc * DESCRIPTOR_BYTES


def encode_hpm(primitives: list[HyperPrimitive]) -> bytes:
    parts = [HPM_MAGIC, struct.pack("<Q", len(primitives))]
    for p in primitives:
        doubles = np.concatenate([p.position, p.rotation, p.log_scale, [p.opacity_logit]])
        parts.append(doubles.astype("<f8").tobytes())
        parts.append(np.asarray(p.sh, dtype="<f4").reshape(-1).tobytes())
        if p.descriptor is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01")
            parts.append(np.asarray(p.descriptor, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_hpm(buf: bytes) -> list[HyperPrimitive]:
    if len(buf) < HPM_HEADER_BYTES:
        raise MapFormatError(f"map is {len(buf)} bytes, shorter than the {HPM_HEADER_BYTES}-byte header")
    if buf[:4] != HPM_MAGIC:
        raise MapFormatError(f"bad magic {buf[:4]!r}, expected {HPM_MAGIC!r}")
    (count,) = struct.unpack_from("<Q", buf, 4)
    offset = HPM_HEADER_BYTES
    out = []
    for i in range(count):
        if offset + HPM_RECORD_BYTES > len(buf):
            raise MapFormatError(f"map truncated in primitive {i} of {count}")
        doubles = np.frombuffer(buf, dtype="<f8", count=11, offset=offset).astype(np.float64)
        offset += 88
        sh = np.frombuffer(buf, dtype="<f4", count=_SH_VALUES, offset=offset).astype(np.float64)
        offset += 4 * _SH_VALUES
        flag = buf[offset]
        offset += 1
        descriptor = None
        if flag == 1:
            if offset + DESCRIPTOR_BYTES > len(buf):
                raise MapFormatError(f"descriptor of primitive {i} truncated")
            descriptor = np.frombuffer(buf, dtype=np.uint8, count=DESCRIPTOR_BYTES, offset=offset).copy()
            offset += DESCRIPTOR_BYTES
        elif flag != 0:
            raise MapFormatError(f"primitive {i} has descriptor flag {flag}")
        out.append(HyperPrimitive(
            position=doubles[0:3],
            rotation=doubles[3:7],
            log_scale=doubles[7:10],
            opacity_logit=float(doubles[10]),
            sh=sh.reshape(SH_COEFFS_PER_CHANNEL, 3),
            descriptor=descriptor,
        ))
    if offset != len(buf):
        raise MapFormatError(f"{len(buf) - offset} trailing bytes after {count} primitives")
    return out


def write_map(path: str | Path, hmap: HyperMap) -> int:
    """Write primitives in id order; returns the number of bytes written."""
    prims = [p for _, p in sorted(hmap.primitive_items(), key=lambda item: item[0])]
    data = encode_hpm(prims)
    Path(path).write_bytes(data)
    return len(data)


def read_map(path: str | Path) -> HyperMap:
    hmap = HyperMap()
    for prim in decode_hpm(Path(path).read_bytes()):
        hmap.add_primitive(prim)
    return hmap


# ---------------------------------------------------------------------------
# trajectory.txt
# ---------------------------------------------------------------------------


def format_tum_line(timestamp: float, pose: Pose) -> str:
    """One TUM row for a world-to-camera ``pose``."""
    T_wc = pose.inverse()
    w, x, y, z = T_wc.rotation
    values = [*T_wc.translation, x, y, z, w]
    return f"{timestamp:.6f} " + " ".join(f"{v:.9g}" for v in values)


def write_trajectory(path: str | Path, trajectory: list[tuple[float, Pose]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in trajectory:
            fh.write(format_tum_line(t, pose) + "\n")


# ---------------------------------------------------------------------------
# Images and report
# ---------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6 PPM of an RGB float image in [0, 1]."""
    bgr = cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr, [cv2.IMWRITE_PXM_BINARY, 1]):
        raise OSError(f"cannot write {path}")


def write_report(path: str | Path, report: dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def write_outputs(
    out_dir: str | Path,
    report: dict[str, Any],
    trajectory: list[tuple[float, Pose]],
    hmap: HyperMap,
    renders: dict[int, np.ndarray] | None = None,
) -> dict[str, Path]:
    """trajectory.txt, renders/, map.hpm and report.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / TRAJECTORY_FILENAME,
        "map": out / MAP_FILENAME,
        "report": out / REPORT_FILENAME,
        "renders": out / RENDERS_DIRNAME,
    }
    write_trajectory(paths["trajectory"], trajectory)
    write_map(paths["map"], hmap)
    paths["renders"].mkdir(exist_ok=True)
    for kf_id, image in sorted((renders or {}).items()):
        write_ppm(paths["renders"] / f"{kf_id:06d}.ppm", image)
    write_report(paths["report"], report)
    return paths
