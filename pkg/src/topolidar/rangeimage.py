"""Spherical projection between LiDAR point clouds and range images.

Conventions (all configurable via ProjectionConfig):
  * columns bin azimuth atan2(y, x) uniformly over [-pi, pi), col 0 at -pi;
  * rows bin inclination asin(z/r) over [fov_down, fov_up], row 0 at fov_up;
  * pixel values are normalized log-range (ln r - ln r_min)/(ln r_max - ln r_min)
    clamped to [0, 1]; exactly 0.0 means "no return";
  * bin collisions keep the nearest point (occlusion semantics).

Stored values are snapped to a 2**-40 grid. The grid is invisible at any
physical precision we care about (worst-case range error ~2e-12 relative)
but it makes project -> unproject -> project reproduce the first image
bit-for-bit: re-deriving a value from a bin-center point lands within a
half-quantum of the stored value, so re-rounding recovers it exactly.
Occupied bins are floored to one quantum so a point at exactly r_min
stays distinguishable from an empty bin.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, EmptyInputError, ShapeError

_QUANTUM = 2.0**-40

MAGIC_IMAGE = b"TLRI"


@dataclass(frozen=True)
class ProjectionConfig:
    fov_down_deg: float = -25.0
    fov_up_deg: float = 3.0
    r_min: float = 1.0
    r_max: float = 80.0
    log_scale: bool = True

    def __post_init__(self):
        if not self.fov_down_deg < self.fov_up_deg:
            raise ConfigError(
                f"fov_down ({self.fov_down_deg}) must lie below fov_up ({self.fov_up_deg})"
            )
        if not 0.0 < self.r_min < self.r_max:
            raise ConfigError(f"need 0 < r_min < r_max, got [{self.r_min}, {self.r_max}]")

    def normalize(self, r: np.ndarray) -> np.ndarray:
        if self.log_scale:
            v = (np.log(r) - math.log(self.r_min)) / (math.log(self.r_max) - math.log(self.r_min))
        else:
            v = (r - self.r_min) / (self.r_max - self.r_min)
        return np.clip(v, 0.0, 1.0)

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        if self.log_scale:
            r = np.exp(v * (math.log(self.r_max) - math.log(self.r_min)) + math.log(self.r_min))
        else:
            r = v * (self.r_max - self.r_min) + self.r_min
        # undo float drift at the endpoints; values in [0,1] mean in-bounds ranges
        return np.clip(r, self.r_min, self.r_max)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64, meters
    intensity: np.ndarray | None = None  # (N,) float64, optional

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.points.shape[0]:
                raise ShapeError(
                    f"intensity length {self.intensity.shape[0]} != point count {self.points.shape[0]}"
                )

    def __len__(self) -> int:
        return self.points.shape[0]

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


@dataclass
class RangeImage:
    values: np.ndarray  # (H, W, C), each value in [0, 1], 0 = empty
    meta: ProjectionConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise ShapeError(f"range image must be (H, W, C), got {self.values.shape}")
        lo, hi = float(self.values.min(initial=0.0)), float(self.values.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ShapeError(f"range image values must lie in [0, 1], found [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The first channel as an (H, W) view."""
        return self.values[:, :, 0]

    def occupancy(self) -> np.ndarray:
        """(H, W) bool mask of bins holding a return."""
        return self.values[:, :, 0] > 0.0


def _bin_angles(pc_points: np.ndarray, cfg: ProjectionConfig):
    r = np.linalg.norm(pc_points, axis=1)
    az = np.arctan2(pc_points[:, 1], pc_points[:, 0])
    with np.errstate(invalid="ignore"):
        inc = np.arcsin(np.divide(pc_points[:, 2], r, out=np.zeros_like(r), where=r > 0))
    return r, az, inc


def project(pc: PointCloud, cfg: ProjectionConfig, height: int, width: int) -> RangeImage:
    """Spherical projection; nearest return wins each bin; empty bins are 0."""
    if len(pc) == 0:
        raise EmptyInputError("cannot project an empty point cloud")
    r, az, inc = _bin_angles(pc.points, cfg)
    fd, fu = math.radians(cfg.fov_down_deg), math.radians(cfg.fov_up_deg)

    keep = (
        np.isfinite(r)
        & (r >= cfg.r_min)
        & (r <= cfg.r_max)
        & (inc >= fd)
        & (inc <= fu)
    )
    if not keep.any():
        raise EmptyInputError(
            f"no points survive filtering (range [{cfg.r_min}, {cfg.r_max}] m, "
            f"FOV [{cfg.fov_down_deg}, {cfg.fov_up_deg}] deg)"
        )
    r, az, inc = r[keep], az[keep], inc[keep]

    col = np.floor((az + math.pi) / (2.0 * math.pi) * width).astype(np.intp) % width
    row = np.floor((fu - inc) / (fu - fd) * height).astype(np.intp)
    row = np.clip(row, 0, height - 1)  # inc == fov_down lands on the last row

    nearest = np.full(height * width, np.inf)
    np.minimum.at(nearest, row * width + col, r)
    occupied = np.isfinite(nearest)

    flat = np.zeros(height * width)
    v = cfg.normalize(nearest[occupied])
    v = np.round(v / _QUANTUM) * _QUANTUM
    flat[occupied] = np.maximum(v, _QUANTUM)
    return RangeImage(flat.reshape(height, width, 1), cfg)


def ray_grid(cfg: ProjectionConfig, height: int, width: int) -> np.ndarray:
    """Unit direction of every bin center, shape (H, W, 3)."""
    fd, fu = math.radians(cfg.fov_down_deg), math.radians(cfg.fov_up_deg)
    az = (np.arange(width) + 0.5) / width * 2.0 * math.pi - math.pi
    inc = fu - (np.arange(height) + 0.5) / height * (fu - fd)
    cos_inc, sin_inc = np.cos(inc)[:, None], np.sin(inc)[:, None]
    dirs = np.empty((height, width, 3))
    dirs[:, :, 0] = cos_inc * np.cos(az)[None, :]
    dirs[:, :, 1] = cos_inc * np.sin(az)[None, :]
    dirs[:, :, 2] = np.broadcast_to(sin_inc, (height, width))
    return dirs


def unproject(img: RangeImage) -> PointCloud:
    """One point per nonzero bin, on the bin-center ray at the stored range."""
    mask = img.occupancy()
    dirs = ray_grid(img.meta, img.height, img.width)[mask]
    r = img.meta.denormalize(img.plane[mask])
    return PointCloud(dirs * r[:, None])


# -- file formats ------------------------------------------------------------


def read_kitti_bin(path: str | Path) -> PointCloud:
    """Packed little-endian float32 records of (x, y, z, intensity)."""
    blob = Path(path).read_bytes()
    if len(blob) % 16:
        raise DataFormatError(
            f"{path}: partial 16-byte record starting at byte offset {len(blob) - len(blob) % 16}"
        )
    rec = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def write_kitti_bin(path: str | Path, pc: PointCloud) -> None:
    rec = np.zeros((len(pc), 4), dtype="<f4")
    rec[:, :3] = pc.points
    if pc.intensity is not None:
        rec[:, 3] = pc.intensity
    Path(path).write_bytes(rec.tobytes())


def save_range_image(path: str | Path, img: RangeImage) -> None:
    """Dump: magic "TLRI", H, W, C as u32 LE, then row-major f64 payload."""
    header = MAGIC_IMAGE + struct.pack("<III", img.height, img.width, img.channels)
    Path(path).write_bytes(header + np.ascontiguousarray(img.values, dtype="<f8").tobytes())


def load_range_image(path: str | Path, cfg: ProjectionConfig | None = None) -> RangeImage:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC_IMAGE:
        raise DataFormatError(f"{path}: not a range-image dump (magic {blob[:4]!r})")
    h, w, c = struct.unpack_from("<III", blob, 4)
    want = 16 + 8 * h * w * c
    if len(blob) != want:
        raise DataFormatError(f"{path}: expected {want} bytes for {h}x{w}x{c}, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8", offset=16).reshape(h, w, c).copy()
    return RangeImage(values, cfg if cfg is not None else ProjectionConfig())


def write_ply(path: str | Path, pc: PointCloud) -> None:
    """ASCII PLY for external viewers; intensity carried when present."""
    has_i = pc.intensity is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pc)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_i:
        lines.append("property float intensity")
    lines.append("end_header")
    for i in range(len(pc)):
        x, y, z = pc.points[i]
        row = f"{x:.6f} {y:.6f} {z:.6f}"
        if has_i:
            row += f" {pc.intensity[i]:.6f}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
