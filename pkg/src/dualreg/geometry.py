"""Exact rigid-transform algebra: unit quaternions, SE(3) ops, random sampling.

Conventions: quaternions are scalar-first (w, x, y, z), rotations are
right-handed, and the sign ambiguity q == -q is resolved by canonicalizing
to w >= 0. Composition follows apply-second-first: compose(a, b) applied to
a point equals a(b(p)).

All functions are pure; rng-consuming ones take an explicit numpy Generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import check_points, check_rng, check_vector3

UNIT_NORM_ATOL = 1e-4


class DegenerateQuaternionError(ValueError):
    """Raised when a quaternion with (near-)zero norm cannot be normalized."""


@dataclass(frozen=True)
class Quaternion:
    """Unit-capable quaternion, scalar-first."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr) -> "Quaternion":
        a = np.asarray(arr, dtype=np.float64).reshape(-1)
        if a.shape != (4,):
            raise ValueError(f"quaternion array must have 4 entries, got {a.shape}")
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Quaternion":
        ax = check_vector3(axis, "axis")
        n = np.linalg.norm(ax)
        if n == 0.0:
            raise ValueError("rotation axis must be nonzero")
        ax = ax / n
        half = 0.5 * angle_rad
        s = math.sin(half)
        return cls(math.cos(half), s * ax[0], s * ax[1], s * ax[2]).normalized()

    @classmethod
    def from_matrix(cls, mat) -> "Quaternion":
        """Convert a proper rotation matrix to a canonical unit quaternion.

        Shepperd's method: branch on the largest diagonal combination for
        numerical stability.
        """
        r = np.asarray(mat, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {r.shape}")
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            w = 0.25 * s
            x = (r[2, 1] - r[1, 2]) / s
            y = (r[0, 2] - r[2, 0]) / s
            z = (r[1, 0] - r[0, 1]) / s
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            w = (r[2, 1] - r[1, 2]) / s
            x = 0.25 * s
            y = (r[0, 1] + r[1, 0]) / s
            z = (r[0, 2] + r[2, 0]) / s
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
            w = (r[0, 2] - r[2, 0]) / s
            x = (r[0, 1] + r[1, 0]) / s
            y = 0.25 * s
            z = (r[1, 2] + r[2, 1]) / s
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
            w = (r[1, 0] - r[0, 1]) / s
            x = (r[0, 2] + r[2, 0]) / s
            y = (r[1, 2] + r[2, 1]) / s
            z = 0.25 * s
        return cls(w, x, y, z).normalized()

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        """Unit-norm quaternion on the canonical hemisphere (w >= 0)."""
        n = self.norm()
        if n < 1e-12:
            raise DegenerateQuaternionError("cannot normalize zero-norm quaternion")
        sign = -1.0 if self.w < 0.0 else 1.0
        s = sign / n
        return Quaternion(self.w * s, self.x * s, self.y * s, self.z * s)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product; matches to_matrix(a * b) == to_matrix(a) @ to_matrix(b)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def to_matrix(self) -> np.ndarray:
        if abs(self.norm() - 1.0) > UNIT_NORM_ATOL:
            raise ValueError(f"quaternion norm {self.norm():.6g} deviates from 1 beyond {UNIT_NORM_ATOL}")
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )

    def angle_deg(self) -> float:
        """Rotation angle of the unit quaternion, in [0, 180] degrees."""
        w = min(1.0, max(-1.0, abs(self.w) / self.norm()))
        return math.degrees(2.0 * math.acos(w))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (unit quaternion) plus translation, acting as p -> R p + t."""

    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", check_vector3(self.translation, "translation"))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(Quaternion.identity(), np.zeros(3))

    @classmethod
    def from_matrix4(cls, mat) -> "RigidTransform":
        m = np.asarray(mat, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(Quaternion.from_matrix(m[:3, :3]), m[:3, 3].copy())

    def matrix3(self) -> np.ndarray:
        return self.rotation.to_matrix()

    def as_matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.matrix3()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = check_points(points)
        return pts @ self.matrix3().T + self.translation

    def inverse(self) -> "RigidTransform":
        q_inv = self.rotation.conjugate().normalized()
        return RigidTransform(q_inv, -(q_inv.to_matrix() @ self.translation))

    def isclose(self, other: "RigidTransform", atol: float = 1e-6) -> bool:
        return bool(
            np.allclose(self.matrix3(), other.matrix3(), atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )


def quat_normalize(q: Quaternion) -> Quaternion:
    """Unit-normalize with canonical hemisphere; errors on zero norm."""
    return q.normalized()


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    return q.to_matrix()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying b first, then a: R_a R_b, R_a t_b + t_a."""
    q = (a.rotation * b.rotation).normalized()
    t = a.matrix3() @ b.translation + a.translation
    return RigidTransform(q, t)


def apply_transform(transform: RigidTransform, points) -> np.ndarray:
    return transform.apply(points)


def inverse(transform: RigidTransform) -> RigidTransform:
    return transform.inverse()


def random_transform(rng, max_angle: float = 45.0, max_translation: float = 0.5) -> RigidTransform:
    """Sample a transform: axis uniform on the sphere, angle uniform in
    [0, max_angle] degrees, translation components uniform in
    [-max_translation, max_translation].
    """
    if not 0.0 < max_angle <= 180.0:
        raise ValueError(f"max_angle must be in (0, 180], got {max_angle}")
    if max_translation <= 0.0:
        raise ValueError(f"max_translation must be positive, got {max_translation}")
    gen = check_rng(rng)
    axis = gen.normal(size=3)
    while np.linalg.norm(axis) < 1e-9:
        axis = gen.normal(size=3)
    angle = math.radians(gen.uniform(0.0, max_angle))
    translation = gen.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(Quaternion.from_axis_angle(axis, angle), translation)


def residual_transform(gt: RigidTransform, accumulated_pred: RigidTransform) -> RigidTransform:
    """Remaining transform such that compose(residual, accumulated_pred) == gt."""
    return compose(gt, accumulated_pred.inverse())
