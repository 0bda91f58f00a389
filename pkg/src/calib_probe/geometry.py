"""Rigid transforms, Euler perturbations and calibration error metrics.

Conventions
-----------
A ``RigidTransform`` maps points from a source frame into a target frame,
``p_target = R @ p_source + t``. ``compose(a, b)`` is the homogeneous product
``a @ b`` (apply ``b`` first).

Euler angles use the intrinsic z-y-x order, ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``,
everywhere: perturbation sampling, labels and the per-axis error decomposition.
Angles are in degrees, translations in meters, except in ``CalibErrors``
where translations are reported in centimeters.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, GimbalLockError

GIMBAL_EPS = 1e-9
COMPONENTS = ("x", "y", "z", "roll", "pitch", "yaw")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError("rotation block is not a proper rotation")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _trusted(cls, r, t) -> RigidTransform:
        """Skip validation for products of already-valid transforms."""
        out = object.__new__(cls)
        r = np.asarray(r, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(out, "rotation", r)
        object.__setattr__(out, "translation", t)
        return out

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 4x4 or 3x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform ``(N, 3)`` (or a single 3-vector of) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        return invert(self)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def is_valid(self, tol: float = 1e-12) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(r.T @ r - np.eye(3))) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def allclose(self, other: RigidTransform, atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        e = to_euler(self, strict=False)
        return (
            f"RigidTransform(rpy=({e.roll:.6g}, {e.pitch:.6g}, {e.yaw:.6g}) deg, "
            f"t=({e.tx:.6g}, {e.ty:.6g}, {e.tz:.6g}) m)"
        )


@dataclass(frozen=True)
class EulerPerturbation:
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v}")
            object.__setattr__(self, f.name, float(v))

    def as_vector(self) -> np.ndarray:
        """``[tx, ty, tz, roll, pitch, yaw]``, the column order of the error tables."""
        return np.array([self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw])

    @classmethod
    def from_vector(cls, v) -> EulerPerturbation:
        tx, ty, tz, roll, pitch, yaw = (float(x) for x in v)
        return cls(roll=roll, pitch=pitch, yaw=yaw, tx=tx, ty=ty, tz=tz)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class PerturbRange:
    max_translation: float
    max_rotation: float

    def __post_init__(self):
        # zero is accepted as the degenerate "no perturbation" range
        if not (self.max_translation >= 0 and self.max_rotation >= 0):
            raise ConfigError(f"perturbation range must be non-negative, got {self}")
        if not (self.max_rotation <= 180):
            raise ConfigError("max_rotation must not exceed 180 degrees")

    def contains(self, e: EulerPerturbation, tol: float = 1e-12) -> bool:
        v = e.as_vector()
        return bool(
            np.all(np.abs(v[:3]) <= self.max_translation + tol)
            and np.all(np.abs(v[3:]) <= self.max_rotation + tol)
        )


@dataclass(frozen=True)
class CalibErrors:
    """Error tuple; translations in cm, rotations in degrees."""

    e_t: float
    e_r: float
    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float

    FIELDS = ("e_t", "e_r", "x", "y", "z", "roll", "pitch", "yaw")

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS])


def identity() -> RigidTransform:
    return RigidTransform()


def transl(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), (x, y, z))


def rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(r) -> np.ndarray:
    """Nearest rotation matrix (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    if np.linalg.det(u @ vt) < 0:
        u[:, -1] = -u[:, -1]
    return u @ vt


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform._trusted(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def compose_chain(transforms) -> RigidTransform:
    """Left-to-right product, re-orthonormalized every 100 factors."""
    out = identity()
    for i, t in enumerate(transforms, 1):
        out = compose(out, t)
        if i % 100 == 0:
            out = RigidTransform(orthonormalize(out.rotation), out.translation)
    return RigidTransform(orthonormalize(out.rotation), out.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T.copy()
    return RigidTransform._trusted(rt, -rt @ t.translation)


@functools.lru_cache(maxsize=64)
def _checked_axes(raw: bytes, shape: tuple) -> np.ndarray:
    q = np.frombuffer(raw, dtype=np.float64).reshape(shape)
    if q.shape != (3, 3) or np.abs(q @ q.T - np.eye(3)).max() > 1e-12 or np.linalg.det(q) < 0:
        raise ValueError("axes must be a proper 3x3 rotation")
    return q


def _axes(axes):
    if axes is None:
        return None
    q = np.ascontiguousarray(axes, dtype=np.float64)
    return _checked_axes(q.tobytes(), q.shape)


def from_euler(e: EulerPerturbation, axes=None) -> RigidTransform:
    """``R = Rz(yaw) Ry(pitch) Rx(roll)``; translation ``(tx, ty, tz)``.

    ``axes`` (a rotation ``Q`` from the transform's frame to the frame the angles
    are measured in) makes the angles refer to rotated axes: ``R = Q.T Rzyx Q``.
    The translation stays in the transform's own frame.
    """
    cr, sr = math.cos(math.radians(e.roll)), math.sin(math.radians(e.roll))
    cp, sp = math.cos(math.radians(e.pitch)), math.sin(math.radians(e.pitch))
    cy, sy = math.cos(math.radians(e.yaw)), math.sin(math.radians(e.yaw))
    r = np.array([[cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
                  [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
                  [-sp, cp * sr, cp * cr]])
    q = _axes(axes)
    if q is not None:
        r = q.T @ r @ q
    return RigidTransform._trusted(r, (e.tx, e.ty, e.tz))


def rotation_to_rpy(r, strict: bool = True) -> tuple[float, float, float]:
    """(roll, pitch, yaw) in degrees for ``R = Rz(yaw) Ry(pitch) Rx(roll)``.

    At gimbal lock (``|sin(pitch)| > 1 - 1e-9``) raises ``GimbalLockError`` when
    ``strict``, otherwise folds the whole in-plane angle into yaw with roll = 0.
    """
    r = np.asarray(r)
    sp = -r[2, 0]
    if abs(sp) > 1.0 - GIMBAL_EPS:
        if strict:
            raise GimbalLockError(f"pitch at +-90 degrees (sin(pitch)={sp:.12f})")
        pitch = math.copysign(90.0, sp)
        yaw = math.degrees(math.atan2(-r[0, 1], r[1, 1]))
        return 0.0, pitch, yaw
    roll = math.atan2(r[2, 1], r[2, 2])
    pitch = math.atan2(sp, math.hypot(r[0, 0], r[1, 0]))
    yaw = math.atan2(r[1, 0], r[0, 0])
    return math.degrees(roll), math.degrees(pitch), math.degrees(yaw)


def to_euler(t: RigidTransform, strict: bool = True, axes=None) -> EulerPerturbation:
    q = _axes(axes)
    r = t.rotation if q is None else q @ t.rotation @ q.T
    roll, pitch, yaw = rotation_to_rpy(r, strict=strict)
    tx, ty, tz = t.translation
    return EulerPerturbation(roll=roll, pitch=pitch, yaw=yaw, tx=tx, ty=ty, tz=tz)


def rotation_angle(r) -> float:
    """Geodesic rotation angle in degrees (atan2 form, accurate near zero)."""
    r = np.asarray(r)
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * math.sqrt(
        (r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2
    )
    return math.degrees(math.atan2(s, c))


def sample_perturbation(prange: PerturbRange, rng: np.random.Generator) -> EulerPerturbation:
    """One uniform draw: translations in [-max_t, max_t] m, angles in [-max_r, max_r] deg."""
    return EulerPerturbation.from_vector(sample_perturbations(prange, rng, 1)[0])


def sample_perturbations(prange: PerturbRange, rng: np.random.Generator, n: int) -> np.ndarray:
    """``(n, 6)`` array in ``[tx, ty, tz, roll, pitch, yaw]`` order."""
    u = rng.uniform(-1.0, 1.0, size=(n, 6))
    scale = np.array([prange.max_translation] * 3 + [prange.max_rotation] * 3)
    return u * scale


def ground_truth_from_perturbation(t_init: RigidTransform, delta: RigidTransform) -> RigidTransform:
    """``T_gt = T_init @ inv(delta)``."""
    return compose(t_init, invert(delta))


def calib_error(pred: RigidTransform, gt: RigidTransform, axes=None) -> CalibErrors:
    """Errors of ``pred`` w.r.t. ``gt`` from the relative transform ``inv(gt) @ pred``.

    ``axes`` selects the frame of the per-axis angle decomposition, as in ``to_euler``.
    """
    e = compose(invert(gt), pred)
    q = _axes(axes)
    r = e.rotation if q is None else q @ e.rotation @ q.T
    roll, pitch, yaw = rotation_to_rpy(r, strict=False)
    tc = e.translation * 100.0
    return CalibErrors(
        e_t=float(np.linalg.norm(tc)),
        e_r=rotation_angle(e.rotation),
        x=abs(float(tc[0])),
        y=abs(float(tc[1])),
        z=abs(float(tc[2])),
        roll=abs(roll),
        pitch=abs(pitch),
        yaw=abs(yaw),
    )


def calib_errors_batch(pred: np.ndarray, gt: np.ndarray, axes=None) -> np.ndarray:
    """Row-wise ``calib_error`` for ``(n, 6)`` Euler vectors; returns ``(n, 8)``."""
    rows = [
        calib_error(
            from_euler(EulerPerturbation.from_vector(p), axes),
            from_euler(EulerPerturbation.from_vector(g), axes),
            axes,
        ).as_vector()
        for p, g in zip(pred, gt)
    ]
    return np.array(rows).reshape(-1, len(CalibErrors.FIELDS))
