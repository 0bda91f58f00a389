"""Synthetic box worlds and ray-cast LiDAR / camera simulation.

World frame: x lateral, y forward along the driving corridor, z up, ground at
z = 0. The LiDAR frame follows the usual automotive layout (x forward, y left,
z up); camera frames are optical (x right, y down, z forward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .geometry import RigidTransform, compose, invert, rot_z, transl
from .sensor import Intrinsics, PointCloud

LIDAR_HEIGHT = 1.73
DEFAULT_BASELINE = 0.54


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: float

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2


@dataclass(frozen=True)
class World:
    boxes: tuple[Box, ...] = ()
    ground_albedo: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for b in self.boxes:
            if min(b.size) <= 0:
                raise ValueError(f"box sizes must be positive: {b}")
            if b.min_corner[2] < -1e-12:
                raise ValueError(f"box below ground: {b}")

    def box_arrays(self):
        if not self.boxes:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        lo = np.array([b.min_corner for b in self.boxes])
        hi = np.array([b.max_corner for b in self.boxes])
        alb = np.array([b.albedo for b in self.boxes])
        return lo, hi, alb


@dataclass(frozen=True)
class LidarSpec:
    n_beams: int = 32
    vertical_fov: tuple[float, float] = (-24.8, 2.0)
    azimuth_steps: int = 1024
    max_range: float = 80.0

    def __post_init__(self):
        if self.n_beams < 1 or self.azimuth_steps < 8 or not self.max_range > 0:
            raise ConfigError(f"invalid LiDAR spec: {self}")
        lo, hi = self.vertical_fov
        if lo > hi:
            raise ConfigError(f"vertical_fov must be (min, max), got {self.vertical_fov}")

    def elevations(self) -> np.ndarray:
        lo, hi = self.vertical_fov
        if self.n_beams == 1:
            return np.array([math.radians((lo + hi) / 2)])
        return np.radians(np.linspace(lo, hi, self.n_beams))

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the LiDAR frame, beam-major."""
        el = self.elevations()[:, None]
        az = (2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps)[None, :]
        d = np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)],
            axis=-1,
        )
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class Camera:
    id: str
    t_lidar_to_cam: RigidTransform
    intrinsics: Intrinsics


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"camera ids must be unique: {ids}")
        for c in self.cameras:
            if not c.t_lidar_to_cam.is_valid(1e-9):
                raise ConfigError(f"camera {c.id}: extrinsic is not a rigid transform")

    def __getitem__(self, camera_id: str) -> Camera:
        for c in self.cameras:
            if c.id == camera_id:
                return c
        raise ConfigError(f"unknown camera id {camera_id!r}; rig has {self.ids}")

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]

    def relative(self, src: str, dst: str) -> RigidTransform:
        """Transform from camera ``src`` frame into camera ``dst`` frame."""
        return compose(self[dst].t_lidar_to_cam, invert(self[src].t_lidar_to_cam))

    def to_dict(self) -> dict:
        return {
            "cameras": [
                {
                    "id": c.id,
                    "t_lidar_to_cam": c.t_lidar_to_cam.matrix[:3].ravel().tolist(),
                    "intrinsics": c.intrinsics.to_dict(),
                }
                for c in self.cameras
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraRig:
        cams = []
        for c in d["cameras"]:
            m = np.asarray(c["t_lidar_to_cam"], dtype=np.float64).reshape(3, 4)
            cams.append(Camera(c["id"], RigidTransform.from_matrix(m), Intrinsics.from_dict(c["intrinsics"])))
        return cls(tuple(cams))


# LiDAR (x fwd, y left, z up) -> optical (x right, y down, z fwd)
LIDAR_TO_OPTICAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_intrinsics(height: int = 160, width: int = 512) -> Intrinsics:
    """Desk-scale pinhole; 320x1024 gives the full-scale option at the same field of view."""
    s = width / 512
    return Intrinsics(fx=360.0 * s, fy=360.0 * s, cx=width / 2, cy=56.0 * height / 160,
                      width=width, height=height)


def default_rig(baseline: float = DEFAULT_BASELINE, intrinsics: Intrinsics | None = None) -> CameraRig:
    """Left camera 0.27 m ahead of and 0.08 m below the LiDAR; right = left shifted by ``baseline``."""
    k = intrinsics or default_intrinsics()
    left = RigidTransform(LIDAR_TO_OPTICAL, (0.0, -0.08, -0.27))
    right = compose(transl(-baseline, 0.0, 0.0), left)
    return CameraRig((Camera("left", left, k), Camera("right", right, k)))


def generate_world(n_boxes: int, extent: float, seed: int, min_forward: float = 5.0,
                   lane_half_width: float = 4.0, forward_extent: float | None = None) -> World:
    """Ground plus ``n_boxes`` boxes flanking a straight driving lane.

    Centers are uniform over ``|x| <= extent``, ``min_forward <= y <= forward_extent``
    (default ``extent``) minus the lane: every box stays clear of ``|x| < lane_half_width``.
    """
    forward_extent = extent if forward_extent is None else forward_extent
    if n_boxes < 0 or not forward_extent > min_forward or not 0 <= lane_half_width < extent:
        raise ConfigError(f"invalid world parameters n_boxes={n_boxes}, extent={extent}")
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_boxes):
        sx, sy = rng.uniform(1.0, 6.0, size=2)
        sz = rng.uniform(0.5, 8.0)
        lo = lane_half_width + sx / 2
        side = 1.0 if rng.random() < 0.5 else -1.0
        cx = side * rng.uniform(min(lo, extent), extent)
        cy = rng.uniform(min_forward, forward_extent)
        alb = rng.uniform(0.2, 1.0)
        boxes.append(Box((float(cx), float(cy), float(sz / 2)), (float(sx), float(sy), float(sz)), float(alb)))
    return World(tuple(boxes), ground_albedo=0.3, seed=int(seed))


def vehicle_pose(lateral: float = 0.0, forward: float = 0.0, heading: float = 0.0,
                 height: float = LIDAR_HEIGHT) -> RigidTransform:
    """LiDAR-to-world pose; ``heading`` in degrees from the +y corridor axis."""
    return RigidTransform(rot_z(90.0 + heading), (lateral, forward, height))


def sample_vehicle_pose(rng: np.random.Generator) -> RigidTransform:
    lateral = rng.uniform(-0.5, 0.5)
    forward = rng.uniform(-3.0, 0.0)
    heading = rng.uniform(-1.0, 1.0)
    return vehicle_pose(lateral, forward, heading)


def lidar_scan(w: World, pose: RigidTransform, spec: LidarSpec) -> PointCloud:
    """Nearest hit per (beam, azimuth) ray, returned in the LiDAR frame."""
    d_lidar = spec.ray_directions()
    d_world = d_lidar @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, d_world.shape)
    lo, hi, alb = w.box_arrays()
    t, hit = kernels.raycast(origins, d_world, lo, hi, ground=True, max_range=spec.max_range)
    ok = hit != kernels.NO_HIT
    pts = d_lidar[ok] * t[ok, None]
    albedo = np.concatenate([[w.ground_albedo], alb])
    return PointCloud(pts, albedo[hit[ok]])


def camera_pose(lidar_pose: RigidTransform, t_lidar_to_cam: RigidTransform) -> RigidTransform:
    """Camera-to-world pose for a camera rigidly mounted on the LiDAR."""
    return compose(lidar_pose, invert(t_lidar_to_cam))


def render_intensity(w: World, cam_pose: RigidTransform, k: Intrinsics, max_range: float = 1e3) -> np.ndarray:
    """Albedo of the nearest surface through each pixel centre (0 on miss), float32."""
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64), np.arange(k.height, dtype=np.float64))
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ cam_pose.rotation.T
    origins = np.broadcast_to(cam_pose.translation, d_world.shape)
    lo, hi, alb = w.box_arrays()
    _, hit = kernels.raycast(origins, d_world, lo, hi, ground=True, max_range=max_range)
    albedo = np.concatenate([[0.0, w.ground_albedo], alb])
    return albedo[hit + 1].reshape(k.height, k.width).astype(np.float32)


def read_velodyne_bin(path) -> PointCloud:
    """Point cloud from consecutive little-endian float32 ``x, y, z, reflectance`` records (experimental)."""
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    if raw.size % 4:
        raise DataError(f"{path}: size is not a multiple of 16 bytes")
    raw = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(raw[:, :3], np.clip(raw[:, 3], 0.0, 1.0))


def read_calib_file(path) -> dict[str, np.ndarray]:
    """``key: 12 floats`` lines parsed as row-major 3x4 matrices (experimental).

    Lines with a different float count are kept as flat arrays.
    """
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key: values'")
        key, vals = line.split(":", 1)
        try:
            arr = np.array([float(x) for x in vals.split()])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        out[key.strip()] = arr.reshape(3, 4) if arr.size == 12 else arr
    return out
