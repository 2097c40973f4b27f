"""Quaternion and rigid-transform algebra plus point-cloud containers.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)`` and kept in canonical form ``w >= 0``.
* Euler angles are intrinsic ZYX (yaw, then pitch, then roll), in degrees,
  so ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
* A :class:`RigidTransform` maps ``p -> R p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Quaternion",
    "RigidTransform",
    "EulerAngles",
    "PointCloud",
    "quat_compose",
    "quat_angle",
    "quat_to_matrix",
    "matrix_to_quat",
    "euler_to_quat",
    "quat_to_euler",
    "axis_angle_quat",
    "transform_apply",
    "transform_compose",
    "transform_inverse",
    "transform_to_matrix",
    "subsample_uniform",
]


def _finite(*values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite input: {values}")


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        _finite(self.w, self.x, self.y, self.z)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        """Unit-length copy in canonical ``w >= 0`` form."""
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        # already unit to rounding: keep values so normalisation is idempotent
        if abs(n - 1.0) <= 4e-16:
            n = 1.0
        s = -1.0 / n if self.w < 0 else 1.0 / n
        return Quaternion(self.w * s, self.x * s, self.y * s, self.z * s)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    # terms grouped in pairs so that conj(q) * q cancels exactly
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            (aw * bx + ax * bw) + (ay * bz - az * by),
            (aw * by + ay * bw) + (az * bx - ax * bz),
            (aw * bz + az * bw) + (ax * by - ay * bx),
        ]
    )


def quat_compose(a: Quaternion, b: Quaternion) -> Quaternion:
    """Rotation ``a ∘ b`` (apply ``b`` first, then ``a``)."""
    return Quaternion.from_array(_hamilton(a.as_array(), b.as_array())).normalized()


def quat_angle(a: Quaternion, b: Quaternion) -> float:
    """Geodesic angle between two rotations, in degrees within [0, 180]."""
    rel = _hamilton(a.conjugate().as_array(), b.as_array())
    # atan2 form stays accurate near 0 where acos loses digits
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0]))))


def axis_angle_quat(axis, angle_deg: float) -> Quaternion:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = math.radians(angle_deg) / 2.0
    s = math.sin(half)
    return Quaternion(math.cos(half), *(axis * s)).normalized()


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    w, x, y, z = q.as_array() / q.norm()
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> Quaternion:
    """Shepperd's method; picks the numerically largest pivot."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    return Quaternion(*q).normalized()


@dataclass(frozen=True)
class EulerAngles:
    """Roll/pitch/yaw in degrees (intrinsic ZYX)."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])


def _wrap_deg(a: float) -> float:
    """Map an angle into (-180, 180]."""
    a = math.fmod(a, 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


def euler_to_quat(e: EulerAngles) -> Quaternion:
    _finite(e.roll, e.pitch, e.yaw)
    hr, hp, hy = (math.radians(v) / 2.0 for v in (e.roll, e.pitch, e.yaw))
    cr, sr = math.cos(hr), math.sin(hr)
    cp, sp = math.cos(hp), math.sin(hp)
    cy, sy = math.cos(hy), math.sin(hy)
    return Quaternion(
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    ).normalized()


def quat_to_euler(q: Quaternion) -> EulerAngles:
    """Inverse of :func:`euler_to_quat`.

    At gimbal lock (``|pitch| = 90°``) roll and yaw are not separable; the
    whole residual is then reported as yaw and roll is set to 0.
    """
    w, x, y, z = q.normalized().as_array()
    sinp = 2.0 * (w * y - z * x)
    if abs(sinp) >= 1.0 - 1e-12:
        pitch = math.copysign(90.0, sinp)
        roll = 0.0
        # with roll fixed at 0: R = Rz(yaw) Ry(±90), so m01 = -sin(yaw), m11 = cos(yaw)
        m = quat_to_matrix(Quaternion(w, x, y, z))
        yaw = math.degrees(math.atan2(-m[0, 1], m[1, 1]))
        return EulerAngles(roll, pitch, _wrap_deg(yaw))
    roll = math.degrees(math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y)))
    pitch = math.degrees(math.asin(sinp))
    yaw = math.degrees(math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))
    return EulerAngles(_wrap_deg(roll), pitch, _wrap_deg(yaw))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation: {t}")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", self.rotation.normalized())

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_array(cls, a) -> "RigidTransform":
        """From the 7-vector ``(qw, qx, qy, qz, tx, ty, tz)``."""
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return cls(Quaternion.from_array(a[:4]), a[4:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.as_array(), self.translation])

    def matrix(self) -> np.ndarray:
        return transform_to_matrix(self)

    def __repr__(self):
        q = self.rotation
        t = self.translation
        return (
            f"RigidTransform(q=({q.w:.6g}, {q.x:.6g}, {q.y:.6g}, {q.z:.6g}), "
            f"t=({t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}))"
        )


def transform_to_matrix(t: RigidTransform) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = quat_to_matrix(t.rotation)
    m[:3, 3] = t.translation
    return m


def transform_apply(t: RigidTransform, p) -> np.ndarray:
    """Apply ``t`` to a single point ``(3,)`` or a stack ``(n, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    return p @ quat_to_matrix(t.rotation).T + t.translation


def transform_compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equal to applying ``inner`` then ``outer``."""
    rot = quat_compose(outer.rotation, inner.rotation)
    trans = quat_to_matrix(outer.rotation) @ inner.translation + outer.translation
    return RigidTransform(rot, trans)


def transform_inverse(t: RigidTransform) -> RigidTransform:
    inv_rot = t.rotation.conjugate()
    return RigidTransform(inv_rot, -(quat_to_matrix(inv_rot) @ t.translation))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points ``(n, 3)`` in meters with optional per-point intensity in [0, 1]."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError(f"intensity length {len(inten)} != point count {len(pts)}")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(transform_apply(t, self.points), self.intensity)


def subsample_uniform(pc: PointCloud, rate: int) -> PointCloud:
    """Keep every ``rate``-th point starting at index 0."""
    if int(rate) != rate or rate < 1:
        raise ValueError(f"subsampling rate must be a positive integer, got {rate!r}")
    rate = int(rate)
    inten = None if pc.intensity is None else pc.intensity[::rate]
    return PointCloud(pc.points[::rate], inten)
