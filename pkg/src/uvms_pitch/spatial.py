"""Spatial algebra: poses, twists, wrenches, quaternions and 6-D cross products.

Conventions used throughout the package:

* spatial 6-vectors are ordered angular first, ``[wx, wy, wz, vx, vy, vz]``
  (torque first for wrenches);
* quaternions are scalar first ``[w, x, y, z]`` and map body to world;
* the body frame is forward-left-up, roll/pitch/yaw follow the ZYX
  (yaw-pitch-roll) convention ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.

The small kernels are ``numba`` compiled because the simulator calls them
a few hundred times per 1 ms step.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

BODY = "body"
WORLD = "world"

GIMBAL_MARGIN = 1e-3


class FrameMismatchError(ValueError):
    """Raised when twists or wrenches from different frames are combined."""


class GimbalWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# compiled 3-vector / 3x3 helpers
# ---------------------------------------------------------------------------


@njit(cache=True)
def cross3(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def mat3_vec(m, v):
    out = np.empty(3)
    for i in range(3):
        out[i] = m[i, 0] * v[0] + m[i, 1] * v[1] + m[i, 2] * v[2]
    return out


@njit(cache=True)
def mat3T_vec(m, v):
    out = np.empty(3)
    for i in range(3):
        out[i] = m[0, i] * v[0] + m[1, i] * v[1] + m[2, i] * v[2]
    return out


@njit(cache=True)
def mat3_mul(a, b):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]
    return out


@njit(cache=True)
def skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


@njit(cache=True)
def axis_angle_matrix(axis, angle):
    """Rotation by ``angle`` about unit ``axis`` (Rodrigues)."""
    c = math.cos(angle)
    s = math.sin(angle)
    t = 1.0 - c
    x, y, z = axis[0], axis[1], axis[2]
    return np.array(
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    )


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------


@njit(cache=True)
def quat_to_matrix(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@njit(cache=True)
def quat_mul(a, b):
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return out


@njit(cache=True)
def quat_exp(rotvec):
    """Unit quaternion of the rotation vector ``rotvec`` (axis * angle)."""
    angle = math.sqrt(rotvec[0] ** 2 + rotvec[1] ** 2 + rotvec[2] ** 2)
    out = np.empty(4)
    if angle < 1e-12:
        out[0] = 1.0
        out[1] = 0.5 * rotvec[0]
        out[2] = 0.5 * rotvec[1]
        out[3] = 0.5 * rotvec[2]
        return out / math.sqrt(np.sum(out * out))
    half = 0.5 * angle
    s = math.sin(half) / angle
    out[0] = math.cos(half)
    out[1] = s * rotvec[0]
    out[2] = s * rotvec[1]
    out[3] = s * rotvec[2]
    return out


@njit(cache=True)
def quat_rpy(q):
    """ZYX roll, pitch, yaw of a unit quaternion (no gimbal check)."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    sp = 2.0 * (w * y - z * x)
    if sp > 1.0:
        sp = 1.0
    elif sp < -1.0:
        sp = -1.0
    pitch = math.asin(sp)
    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return roll, pitch, yaw


def quaternion_to_rpy(q, check: bool = True) -> tuple[float, float, float]:
    """Convert a world-from-body unit quaternion to ZYX roll, pitch, yaw.

    Pitch is returned in [-pi/2, pi/2]. A pitch within ``GIMBAL_MARGIN`` of
    +-pi/2 emits :class:`GimbalWarning`; a passively stable vehicle never
    gets there, so it usually means the simulation blew up.
    """
    q = np.asarray(q, dtype=float)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"quaternion is not unit length (|q| = {norm:.9f})")
    roll, pitch, yaw = quat_rpy(q)
    if check and abs(pitch) > math.pi / 2 - GIMBAL_MARGIN:
        warnings.warn(f"pitch {pitch:.6f} rad is at gimbal lock", GimbalWarning, stacklevel=2)
    return roll, pitch, yaw


def rpy_to_quaternion(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    q = np.array(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ]
    )
    return q / np.linalg.norm(q)


def quaternions_to_rpy(quats: np.ndarray) -> np.ndarray:
    """Row-wise :func:`quaternion_to_rpy` for an ``(N, 4)`` array; yaw is unwrapped."""
    w, x, y, z = quats.T
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2.0 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    if np.any(np.abs(pitch) > math.pi / 2 - GIMBAL_MARGIN):
        warnings.warn("pitch reached gimbal lock", GimbalWarning, stacklevel=2)
    return np.column_stack([np.unwrap(roll), pitch, np.unwrap(yaw)])


# ---------------------------------------------------------------------------
# 6-D spatial algebra (angular first)
# ---------------------------------------------------------------------------


@njit(cache=True)
def cross_motion(v, m):
    """Motion cross product ``v x m``."""
    out = np.empty(6)
    w0, w1, w2 = v[0], v[1], v[2]
    u0, u1, u2 = v[3], v[4], v[5]
    out[0] = w1 * m[2] - w2 * m[1]
    out[1] = w2 * m[0] - w0 * m[2]
    out[2] = w0 * m[1] - w1 * m[0]
    out[3] = w1 * m[5] - w2 * m[4] + u1 * m[2] - u2 * m[1]
    out[4] = w2 * m[3] - w0 * m[5] + u2 * m[0] - u0 * m[2]
    out[5] = w0 * m[4] - w1 * m[3] + u0 * m[1] - u1 * m[0]
    return out


@njit(cache=True)
def cross_force(v, f):
    """Force cross product ``v x* f``."""
    out = np.empty(6)
    w0, w1, w2 = v[0], v[1], v[2]
    u0, u1, u2 = v[3], v[4], v[5]
    out[0] = w1 * f[2] - w2 * f[1] + u1 * f[5] - u2 * f[4]
    out[1] = w2 * f[0] - w0 * f[2] + u2 * f[3] - u0 * f[5]
    out[2] = w0 * f[1] - w1 * f[0] + u0 * f[4] - u1 * f[3]
    out[3] = w1 * f[5] - w2 * f[4]
    out[4] = w2 * f[3] - w0 * f[5]
    out[5] = w0 * f[4] - w1 * f[3]
    return out


@njit(cache=True)
def mat6_vec(m, v):
    out = np.zeros(6)
    for i in range(6):
        s = 0.0
        for j in range(6):
            s += m[i, j] * v[j]
        out[i] = s
    return out


@njit(cache=True)
def motion_transform(E, p):
    """6x6 motion transform into a frame rotated by ``E`` (child-from-parent)
    whose origin sits at ``p`` in parent coordinates."""
    X = np.zeros((6, 6))
    Ep = mat3_mul(E, skew(p))
    for i in range(3):
        for j in range(3):
            X[i, j] = E[i, j]
            X[3 + i, 3 + j] = E[i, j]
            X[3 + i, j] = -Ep[i, j]
    return X


@njit(cache=True)
def motion_to_child(E, p, m):
    """Apply :func:`motion_transform` to a motion vector without building it."""
    out = np.empty(6)
    w = mat3_vec(E, m[:3])
    vp = m[3:] + cross3(m[:3], p)
    v = mat3_vec(E, vp)
    out[:3] = w
    out[3:] = v
    return out


@njit(cache=True)
def force_to_parent(E, p, f):
    """Transpose transform of a child-frame force into parent coordinates."""
    out = np.empty(6)
    fl = mat3T_vec(E, f[3:])
    n = mat3T_vec(E, f[:3]) + cross3(p, fl)
    out[:3] = n
    out[3:] = fl
    return out


@njit(cache=True)
def congruence(X, inertia):
    """``X^T @ inertia @ X`` for 6x6 matrices."""
    tmp = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            s = 0.0
            for k in range(6):
                s += inertia[i, k] * X[k, j]
            tmp[i, j] = s
    out = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            s = 0.0
            for k in range(6):
                s += X[k, i] * tmp[k, j]
            out[i, j] = s
    return out


def spatial_inertia_matrix(mass: float, com, rot_inertia) -> np.ndarray:
    """6x6 rigid-body inertia about the body origin (angular first)."""
    c = skew(np.asarray(com, dtype=float))
    I = np.asarray(rot_inertia, dtype=float)
    out = np.zeros((6, 6))
    out[:3, :3] = I + mass * c @ c.T
    out[:3, 3:] = mass * c
    out[3:, :3] = mass * c.T
    out[3:, 3:] = mass * np.eye(3)
    return out


def shift_inertia(matrix, point) -> np.ndarray:
    """Re-express a 6x6 inertia-like matrix given about ``point`` at the origin."""
    X = motion_transform(np.eye(3), np.asarray(point, dtype=float))
    return X.T @ np.asarray(matrix, dtype=float) @ X


def rotate_inertia(matrix, R) -> np.ndarray:
    """Rotate a 6x6 matrix given in frame A into frame B, ``R`` is B-from-A."""
    B = np.zeros((6, 6))
    B[:3, :3] = R
    B[3:, 3:] = R
    return B @ np.asarray(matrix, dtype=float) @ B.T


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def _vec3(x) -> np.ndarray:
    a = np.array(x, dtype=float).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose:
    """World position of the body origin and world-from-body orientation."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        q = np.array(self.orientation, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("orientation quaternion must be finite and non-zero")
        q = q / norm
        q.setflags(write=False)
        object.__setattr__(self, "orientation", q)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def rpy(self) -> tuple[float, float, float]:
        return quaternion_to_rpy(self.orientation)

    @classmethod
    def from_rpy(cls, roll=0.0, pitch=0.0, yaw=0.0, position=(0.0, 0.0, 0.0)) -> Pose:
        return cls(position, rpy_to_quaternion(roll, pitch, yaw))


@dataclass(frozen=True)
class Twist:
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame: str = BODY

    def __post_init__(self):
        object.__setattr__(self, "angular", _vec3(self.angular))
        object.__setattr__(self, "linear", _vec3(self.linear))

    @classmethod
    def from_vector(cls, v, frame: str = BODY) -> Twist:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:], frame)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.angular, self.linear])

    def expect(self, frame: str) -> Twist:
        if self.frame != frame:
            raise FrameMismatchError(f"expected a {frame}-frame twist, got {self.frame}")
        return self


@dataclass(frozen=True)
class Wrench:
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame: str = BODY

    def __post_init__(self):
        object.__setattr__(self, "torque", _vec3(self.torque))
        object.__setattr__(self, "force", _vec3(self.force))

    @classmethod
    def from_vector(cls, v, frame: str = BODY) -> Wrench:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:], frame)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.torque, self.force])

    def __add__(self, other: Wrench) -> Wrench:
        if not isinstance(other, Wrench):
            return NotImplemented
        if other.frame != self.frame:
            raise FrameMismatchError(
                f"cannot add a {other.frame}-frame wrench to a {self.frame}-frame wrench"
            )
        return Wrench(self.torque + other.torque, self.force + other.force, self.frame)

    def expect(self, frame: str) -> Wrench:
        if self.frame != frame:
            raise FrameMismatchError(f"expected a {frame}-frame wrench, got {self.frame}")
        return self


@dataclass(frozen=True)
class SpatialInertia:
    """Rigid inertia of one body, optionally augmented with an added-mass block.

    ``added`` is expressed about the body origin in body axes.
    """

    mass: float
    com: np.ndarray
    inertia: np.ndarray
    added: np.ndarray | None = None

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("mass must be non-negative")
        object.__setattr__(self, "com", _vec3(self.com))
        I = np.array(self.inertia, dtype=float).reshape(3, 3)
        if not np.allclose(I, I.T, atol=1e-12):
            raise ValueError("rotational inertia must be symmetric")
        if np.linalg.eigvalsh(I).min() < -1e-12:
            raise ValueError("rotational inertia must be positive semidefinite")
        I.setflags(write=False)
        object.__setattr__(self, "inertia", I)
        if self.added is not None:
            A = np.array(self.added, dtype=float).reshape(6, 6)
            A.setflags(write=False)
            object.__setattr__(self, "added", A)

    def rigid_matrix(self) -> np.ndarray:
        return spatial_inertia_matrix(self.mass, self.com, self.inertia)

    def matrix(self) -> np.ndarray:
        m = self.rigid_matrix()
        if self.added is not None:
            m = m + self.added
        return m
