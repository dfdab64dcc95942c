"""Pose algebra: frame transforms, quaternion distances, geodesic rotation error.

Conventions
-----------
- Quaternions are scalar-first ``(w, x, y, z)`` and canonicalized to ``w >= 0``
  on construction (for ``w == 0`` the first nonzero vector component is made
  positive). ``q`` and ``-q`` encode the same rotation; all distances here are
  sign-invariant, so canonicalization only affects serialization.
- ``Pose`` pairs a position (meters) with a unit quaternion. ``R(q)`` maps
  body-frame vectors into the parent frame.
- Ego frame of a robot: x forward, y left, z up.
- Angles returned in degrees are in ``[0, 180]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Vec3:
    """3-vector in meters. All components must be finite."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for c in (self.x, self.y, self.z):
            if not math.isfinite(c):
                raise ValueError(f"non-finite Vec3 component: {c!r}")

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def __mul__(self, k: float) -> "Vec3":
        return Vec3(self.x * k, self.y * k, self.z * k)

    __rmul__ = __mul__

    def dot(self, other: "Vec3") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @staticmethod
    def zero() -> "Vec3":
        return Vec3(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class UnitQuat:
    """Unit quaternion, scalar-first.

    Construction normalizes inputs whose norm deviates from 1 by at most
    1e-6 and rejects anything further off. The stored representative has
    ``w >= 0``.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n) or abs(n - 1.0) > _NORM_TOL:
            raise ValueError(f"quaternion norm {n!r} outside unit tolerance")
        w, x, y, z = self.w / n, self.x / n, self.y / n, self.z / n
        # Canonical sign: w > 0, or first nonzero of (x, y, z) positive when w == 0.
        flip = w < 0.0
        if w == 0.0:
            for c in (x, y, z):
                if c != 0.0:
                    flip = c < 0.0
                    break
        if flip:
            w, x, y, z = -w, -x, -y, -z
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @staticmethod
    def identity() -> "UnitQuat":
        return UnitQuat(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(axis: Vec3, angle_rad: float) -> "UnitQuat":
        n = axis.norm()
        if n == 0.0:
            raise ValueError("zero rotation axis")
        h = 0.5 * angle_rad
        s = math.sin(h) / n
        return UnitQuat(math.cos(h), axis.x * s, axis.y * s, axis.z * s)

    @staticmethod
    def from_yaw(yaw_rad: float) -> "UnitQuat":
        return UnitQuat(math.cos(0.5 * yaw_rad), 0.0, 0.0, math.sin(0.5 * yaw_rad))

    def conjugate(self) -> "UnitQuat":
        return UnitQuat(self.w, -self.x, -self.y, -self.z)

    def multiply(self, other: "UnitQuat") -> "UnitQuat":
        """Hamilton product self * other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuat(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, v: Vec3) -> Vec3:
        """Apply the rotation to a vector (body -> parent frame)."""
        w, x, y, z = self.w, self.x, self.y, self.z
        # v' = v + 2*w*(u x v) + 2*(u x (u x v)) with u = (x, y, z)
        ux = y * v.z - z * v.y
        uy = z * v.x - x * v.z
        uz = x * v.y - y * v.x
        uux = y * uz - z * uy
        uuy = z * ux - x * uz
        uuz = x * uy - y * ux
        return Vec3(
            v.x + 2.0 * (w * ux + uux),
            v.y + 2.0 * (w * uy + uuy),
            v.z + 2.0 * (w * uz + uuz),
        )

    def rotate_inverse(self, v: Vec3) -> Vec3:
        return self.conjugate().rotate(v)

    def to_matrix(self) -> list[list[float]]:
        """3x3 rotation matrix, rows are parent-frame images of body axes columns."""
        w, x, y, z = self.w, self.x, self.y, self.z
        return [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]

    def yaw(self) -> float:
        """Heading of the body x-axis projected on the parent xy-plane, radians."""
        r = self.to_matrix()
        return math.atan2(r[1][0], r[0][0])

    def dot(self, other: "UnitQuat") -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w, self.x, self.y, self.z)


@dataclass(frozen=True)
class Pose:
    """Position plus orientation of a frame within a parent frame."""

    position: Vec3
    rotation: UnitQuat

    @staticmethod
    def identity() -> "Pose":
        return Pose(Vec3.zero(), UnitQuat.identity())


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of b's child frame in a's parent frame (a then b)."""
    return Pose(a.position + a.rotation.rotate(b.position), a.rotation.multiply(b.rotation))


def apply(pose_i: Pose, rel: Pose) -> Pose:
    """World pose of a frame given its pose relative to pose_i."""
    return compose(pose_i, rel)


def inverse(pose: Pose) -> Pose:
    """Pose of the parent frame expressed in pose's own frame."""
    inv = pose.rotation.conjugate()
    return Pose(inv.rotate(Vec3.zero() - pose.position), inv)


def relative_pose(pose_i: Pose, pose_j: Pose) -> Pose:
    """Pose of j expressed in i's frame.

    Position is R_i^-1 (p_j - p_i), rotation is q_i^-1 * q_j.
    """
    inv = pose_i.rotation.conjugate()
    return Pose(inv.rotate(pose_j.position - pose_i.position), inv.multiply(pose_j.rotation))


def _signed_norms(q: UnitQuat, q_hat: UnitQuat) -> tuple[float, float]:
    """(||q - q_hat||, ||q + q_hat||), computed componentwise (no cancellation)."""
    dm = math.sqrt(
        (q.w - q_hat.w) ** 2 + (q.x - q_hat.x) ** 2 + (q.y - q_hat.y) ** 2 + (q.z - q_hat.z) ** 2
    )
    dp = math.sqrt(
        (q.w + q_hat.w) ** 2 + (q.x + q_hat.x) ** 2 + (q.y + q_hat.y) ** 2 + (q.z + q_hat.z) ** 2
    )
    return dm, dp


def quat_dist(q: UnitQuat, q_hat: UnitQuat) -> float:
    """min(||q - q_hat||, ||q + q_hat||); sign-invariant, in [0, sqrt(2)]."""
    dm, dp = _signed_norms(q, q_hat)
    return min(dm, dp)


def rot_geodesic_deg(q: UnitQuat, q_hat: UnitQuat) -> float:
    """Geodesic angle between rotations in degrees: 4*arcsin(d_quat/2), in [0, 180].

    Evaluated as 4*atan2(min_norm, max_norm): the two signed norms equal
    2*sin(angle/4) and 2*cos(angle/4), so this is the same quantity with full
    precision at both endpoints.
    """
    dm, dp = _signed_norms(q, q_hat)
    return math.degrees(4.0 * math.atan2(min(dm, dp), max(dm, dp)))


def pos_dist(p: Vec3, p_hat: Vec3) -> float:
    """Euclidean distance in meters."""
    return (p - p_hat).norm()
