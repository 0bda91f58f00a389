"""Pinhole camera model, depth-map projection and raster edits.

Pixel convention: column ``u`` grows to the right, row ``v`` grows down, and
pixel ``(u, v)`` covers ``[u - 0.5, u + 0.5) x [v - 0.5, v + 0.5)`` so projected
coordinates are rounded to the nearest integer (``floor(x + 0.5)``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError
from .fileio import atomic_write_bytes
from .geometry import RigidTransform

NEAR_PLANE = 0.1
PIXEL_ROUNDING = "nearest"

RASTER_MAGIC = b"DPR1"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError("principal point must be finite")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"raster size must be positive: {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def principal_point_inside(self) -> bool:
        return 0 <= self.cx < self.width and 0 <= self.cy < self.height

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> Intrinsics:
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width", "height")})


@dataclass(frozen=True, eq=False)
class DepthMap:
    data: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"raster shape {a.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("depths must be finite and non-negative (0 = no return)")
        object.__setattr__(self, "data", a)

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.intensity is not None:
            i = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(i) != len(p):
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", i)

    def __len__(self):
        return len(self.points)


def _round(x):
    return np.floor(x + 0.5)


def project_pixels(points_cam: np.ndarray, k: Intrinsics):
    """Continuous pixel coordinates of camera-frame points (no culling)."""
    z = points_cam[:, 2]
    u = k.fx * points_cam[:, 0] / z + k.cx
    v = k.fy * points_cam[:, 1] / z + k.cy
    return u, v


def project_indices(cloud: PointCloud, extrinsic: RigidTransform, k: Intrinsics):
    """Integer pixels, depths and source indices of the points that land in the raster."""
    pc = extrinsic.apply(cloud.points) if len(cloud) else np.zeros((0, 3))
    front = pc[:, 2] > NEAR_PLANE
    idx = np.flatnonzero(front)
    pc = pc[front]
    u, v = project_pixels(pc, k)
    cols = _round(u)
    rows = _round(v)
    inside = (cols >= 0) & (cols < k.width) & (rows >= 0) & (rows < k.height)
    return cols[inside].astype(np.int64), rows[inside].astype(np.int64), pc[inside, 2], idx[inside]


def project(cloud: PointCloud, extrinsic: RigidTransform, k: Intrinsics) -> DepthMap:
    """Z-buffered sparse depth map of ``cloud`` seen through ``extrinsic`` (LiDAR to camera)."""
    cols, rows, depth, _ = project_indices(cloud, extrinsic, k)
    return DepthMap(kernels.zbuffer(cols, rows, depth, k.height, k.width), k)


def project_point(point, extrinsic: RigidTransform, k: Intrinsics):
    """Single-point projection: ``(u, v, d)`` integers/depth, or ``None`` if culled."""
    p = extrinsic.apply(np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not p[0, 2] > NEAR_PLANE:
        return None
    u, v = project_pixels(p, k)
    col, row = int(_round(u)[0]), int(_round(v)[0])
    if not (0 <= col < k.width and 0 <= row < k.height):
        return None
    return col, row, float(p[0, 2])


def backproject(u: float, v: float, d: float, k: Intrinsics) -> np.ndarray:
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    return np.array([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d])


def crop(d: DepthMap, x0: int, y0: int, w: int, h: int) -> DepthMap:
    """Sub-raster with the principal point moved into the crop's pixel frame."""
    k = d.intrinsics
    if not (0 <= x0 and 0 <= y0 and w >= 1 and h >= 1 and x0 + w <= k.width and y0 + h <= k.height):
        raise ValueError(f"crop rectangle ({x0}, {y0}, {w}, {h}) outside {k.width}x{k.height} raster")
    kc = replace(k, cx=k.cx - x0, cy=k.cy - y0, width=w, height=h)
    return DepthMap(d.data[y0:y0 + h, x0:x0 + w].copy(), kc)


def crop_raster(a: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    return a[y0:y0 + h, x0:x0 + w].copy()


def resize_nearest(a: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resample by pixel centres; never invents new values."""
    h, w = a.shape
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return a[rows[:, None], cols[None, :]]


def resize(d: DepthMap, height: int, width: int) -> DepthMap:
    """Nearest-neighbour resize with intrinsics scaled about pixel centres."""
    k = d.intrinsics
    sx, sy = width / k.width, height / k.height
    kr = Intrinsics(
        fx=k.fx * sx, fy=k.fy * sy,
        cx=(k.cx + 0.5) * sx - 0.5, cy=(k.cy + 0.5) * sy - 0.5,
        width=width, height=height,
    )
    return DepthMap(resize_nearest(d.data, height, width), kr)


def shift_raster(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = a.shape
    out = np.zeros_like(a)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = a[ys, xs]
    return out


def shift(d: DepthMap, dx: int, dy: int) -> DepthMap:
    """Translate the raster content by ``(dx, dy)`` pixels; intrinsics left as-is on purpose."""
    k = d.intrinsics
    if abs(dx) >= k.width or abs(dy) >= k.height:
        raise ValueError(f"shift ({dx}, {dy}) exceeds raster {k.width}x{k.height}")
    return DepthMap(shift_raster(d.data, int(dx), int(dy)), k)


def densify(d: DepthMap, kernel: int) -> DepthMap:
    """Fill empty pixels with the nearest (minimum) depth within a square window."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    return DepthMap(kernels.densify_min(d.data, kernel), d.intrinsics)


def downsample(d: DepthMap, ratio: float, rng: np.random.Generator) -> DepthMap:
    """Keep each valid pixel independently with probability ``ratio``."""
    if not (0 < ratio <= 1):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    keep = rng.random(d.data.shape) < ratio
    return DepthMap(np.where(keep, d.data, np.float32(0)), d.intrinsics)


def write_raster(path, data: np.ndarray) -> None:
    """DPR1 file: 16-byte little-endian header then row-major float32 values."""
    atomic_write_bytes(path, raster_bytes(data))


def raster_bytes(data: np.ndarray) -> bytes:
    a = np.ascontiguousarray(data, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("raster must be 2-D")
    h, w = a.shape
    return _HEADER.pack(RASTER_MAGIC, w, h, 0) + a.tobytes()


def parse_raster(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DataError(f"{source}: truncated raster header")
    magic, w, h, _ = _HEADER.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise DataError(f"{source}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * w * h
    if len(buf) != expected:
        raise DataError(f"{source}: expected {expected} bytes for {w}x{h}, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def read_raster(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    return parse_raster(buf, str(path))
