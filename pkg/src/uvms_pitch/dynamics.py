"""Articulated forward dynamics of the floating vehicle and its serial arm.

Generalised coordinates are the vehicle pose (world position, world-from-body
quaternion) and the joint angles; generalised velocities are the vehicle
body twist followed by the joint rates. The joint-space mass matrix comes
from the composite-rigid-body algorithm and the velocity/gravity/external
terms from recursive Newton-Euler, both over the added-mass-augmented
inertias. Rigid-body gyroscopic terms use the rigid inertia only: the
added-mass gyroscopic terms are supplied as external wrenches by
:mod:`uvms_pitch.hydrodynamics`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .model import VehicleArmModel
from .spatial import (
    BODY,
    Pose,
    Twist,
    Wrench,
    axis_angle_matrix,
    congruence,
    cross3,
    cross_force,
    cross_motion,
    force_to_parent,
    mat3_mul,
    mat3T_vec,
    mat3_vec,
    mat6_vec,
    motion_to_child,
    motion_transform,
    quat_exp,
    quat_mul,
    quat_to_matrix,
)

DEFAULT_DT = 1e-3

FLOATING = 0
FIXED_BASE = 1
LOCKED_JOINTS = 2
_MODES = {"floating": FLOATING, "fixed": FIXED_BASE, "locked": LOCKED_JOINTS}


class SingularMassMatrixError(ValueError):
    """The mass matrix is not positive definite (non-physical parameters)."""


class SimulationAbort(RuntimeError):
    """A state component became non-finite."""


@dataclass(frozen=True, eq=False)
class SystemState:
    pose: Pose = field(default_factory=Pose)
    twist: Twist = field(default_factory=Twist)
    q: np.ndarray = field(default_factory=lambda: np.zeros(4))
    qd: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.twist.expect(BODY)
        q = np.array(self.q, dtype=float).reshape(-1)
        qd = np.array(self.qd, dtype=float).reshape(-1)
        if q.shape != qd.shape:
            raise ValueError("joint position and velocity vectors differ in length")
        q.setflags(write=False)
        qd.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", qd)

    @classmethod
    def at_rest(cls, q, pose: Pose | None = None) -> SystemState:
        q = np.asarray(q, dtype=float)
        return cls(pose or Pose(), Twist(), q, np.zeros_like(q))

    def velocity_vector(self) -> np.ndarray:
        return np.concatenate([self.twist.vector(), self.qd])

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.pose.position))
            and np.all(np.isfinite(self.pose.orientation))
            and np.all(np.isfinite(self.twist.vector()))
            and np.all(np.isfinite(self.q))
            and np.all(np.isfinite(self.qd))
        )

    def joint_limit_violation(self, model: VehicleArmModel) -> float:
        """Largest excursion beyond the joint position limits (0 inside)."""
        lo = np.maximum(model.lower - self.q, 0.0)
        hi = np.maximum(self.q - model.upper, 0.0)
        return float(max(lo.max(initial=0.0), hi.max(initial=0.0)))


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def kinematics(pack, quat, theta):
    """Per-joint child-from-parent rotations, world rotations of every body
    and body origins in world axes relative to the vehicle origin."""
    n = pack.n
    E = np.empty((n, 3, 3))
    R_w = np.empty((n + 1, 3, 3))
    p = np.zeros((n + 1, 3))
    R_w[0] = quat_to_matrix(quat)
    for i in range(n):
        Rpc = mat3_mul(pack.joint_rot[i], axis_angle_matrix(pack.joint_axis[i], theta[i]))
        E[i] = Rpc.T
        R_w[i + 1] = mat3_mul(R_w[i], Rpc)
        p[i + 1] = p[i] + mat3_vec(R_w[i], pack.joint_origin[i])
    return E, R_w, p


@njit(cache=True)
def joint_motion(pack, i):
    s = np.zeros(6)
    s[:3] = pack.joint_axis[i]
    return s


@njit(cache=True)
def body_velocities(pack, E, nu, thetad):
    n = pack.n
    v = np.empty((n + 1, 6))
    v[0] = nu
    for i in range(n):
        v[i + 1] = motion_to_child(E[i], pack.joint_origin[i], v[i])
        v[i + 1, :3] += pack.joint_axis[i] * thetad[i]
    return v


@njit(cache=True)
def gravity_wrenches(pack, R_w):
    n = pack.n
    out = np.zeros((n + 1, 6))
    for b in range(n + 1):
        g_body = np.empty(3)
        # R^T @ (0, 0, -g)
        for k in range(3):
            g_body[k] = -pack.gravity * R_w[b, 2, k]
        F = pack.mass[b] * g_body
        out[b, :3] = cross3(pack.com[b], F)
        out[b, 3:] = F
    return out


@njit(cache=True)
def mass_matrix_kernel(pack, E):
    n = pack.n
    Ic = pack.inertia_aug.copy()
    for i in range(n, 0, -1):
        X = motion_transform(E[i - 1], pack.joint_origin[i - 1])
        Ic[i - 1] += congruence(X, Ic[i])
    H = np.zeros((6 + n, 6 + n))
    H[:6, :6] = Ic[0]
    for i in range(1, n + 1):
        s = joint_motion(pack, i - 1)
        F = mat6_vec(Ic[i], s)
        H[5 + i, 5 + i] = np.dot(s, F)
        j = i
        while j > 1:
            F = force_to_parent(E[j - 1], pack.joint_origin[j - 1], F)
            j -= 1
            val = np.dot(joint_motion(pack, j - 1), F)
            H[5 + i, 5 + j] = val
            H[5 + j, 5 + i] = val
        F = force_to_parent(E[0], pack.joint_origin[0], F)
        for k in range(6):
            H[5 + i, k] = F[k]
            H[k, 5 + i] = F[k]
    return H


@njit(cache=True)
def bias_kernel(pack, E, v, thetad, f_ext):
    """Generalised forces at zero acceleration, minus external wrenches."""
    n = pack.n
    a = np.zeros((n + 1, 6))
    f = np.empty((n + 1, 6))
    f[0] = cross_force(v[0], mat6_vec(pack.inertia_rb[0], v[0])) - f_ext[0]
    for i in range(1, n + 1):
        a[i] = motion_to_child(E[i - 1], pack.joint_origin[i - 1], a[i - 1])
        a[i] += cross_motion(v[i], joint_motion(pack, i - 1)) * thetad[i - 1]
        f[i] = (
            mat6_vec(pack.inertia_aug[i], a[i])
            + cross_force(v[i], mat6_vec(pack.inertia_rb[i], v[i]))
            - f_ext[i]
        )
    for i in range(n, 0, -1):
        f[i - 1] += force_to_parent(E[i - 1], pack.joint_origin[i - 1], f[i])
    C = np.empty(6 + n)
    C[:6] = f[0]
    for i in range(1, n + 1):
        C[5 + i] = np.dot(joint_motion(pack, i - 1), f[i])
    return C


@njit(cache=True)
def cholesky_solve(A, b):
    """Solve ``A x = b`` for symmetric ``A``; ``ok`` is False if ``A`` is not PD."""
    m = A.shape[0]
    L = np.zeros((m, m))
    scale = 0.0
    for i in range(m):
        scale = max(scale, abs(A[i, i]))
    tol = 1e-14 * max(scale, 1e-300)
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > tol):
            return np.full(m, np.nan), False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, m):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    y = np.empty(m)
    for i in range(m):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
    x = np.empty(m)
    for i in range(m - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, m):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x, True


@njit(cache=True)
def solve_accelerations(H, C, tau, mode):
    n = H.shape[0] - 6
    rhs = -C.copy()
    rhs[6:] += tau
    if mode == 0:
        return cholesky_solve(H, rhs)
    qdd = np.zeros(6 + n)
    if mode == 1:
        x, ok = cholesky_solve(H[6:, 6:].copy(), rhs[6:].copy())
        qdd[6:] = x
    else:
        x, ok = cholesky_solve(H[:6, :6].copy(), rhs[:6].copy())
        qdd[:6] = x
    return qdd, ok


@njit(cache=True)
def accelerations_kernel(pack, quat, nu, theta, thetad, tau, f_ext, gravity_on, mode):
    E, R_w, _ = kinematics(pack, quat, theta)
    if mode == 1:
        nu = np.zeros(6)
    v = body_velocities(pack, E, nu, thetad)
    fe = f_ext.copy()
    if gravity_on:
        fe += gravity_wrenches(pack, R_w)
    H = mass_matrix_kernel(pack, E)
    C = bias_kernel(pack, E, v, thetad, fe)
    return solve_accelerations(H, C, tau, mode)


@njit(cache=True)
def integrate_kernel(pos, quat, nu, theta, thetad, qdd, dt):
    """Semi-implicit Euler: velocities first, then the pose with the new twist."""
    nu2 = nu + dt * qdd[:6]
    thd2 = thetad + dt * qdd[6:]
    R = quat_to_matrix(quat)
    pos2 = pos + dt * mat3_vec(R, nu2[3:])
    q2 = quat_mul(quat, quat_exp(nu2[:3] * dt))
    q2 = q2 / math.sqrt(np.sum(q2 * q2))
    th2 = theta + dt * thd2
    return pos2, q2, nu2, th2, thd2


@njit(cache=True)
def momentum_rate_body(pack, E, v, thetad, qdd):
    """Rate of change of total momentum as a base-frame wrench about the base origin.

    Sums ``I a + v x* (I v)`` over all bodies with the accelerations implied
    by ``qdd``; this equals the net external wrench (added-mass gyroscopic
    terms excluded, as they are part of the momentum).
    """
    n = pack.n
    a = np.empty((n + 1, 6))
    f = np.empty((n + 1, 6))
    a[0] = qdd[:6]
    for i in range(1, n + 1):
        a[i] = motion_to_child(E[i - 1], pack.joint_origin[i - 1], a[i - 1])
        s = joint_motion(pack, i - 1)
        a[i] += s * qdd[5 + i] + cross_motion(v[i], s) * thetad[i - 1]
    for i in range(n + 1):
        f[i] = mat6_vec(pack.inertia_aug[i], a[i]) + cross_force(v[i], mat6_vec(pack.inertia_aug[i], v[i]))
    for i in range(n, 0, -1):
        f[i - 1] += force_to_parent(E[i - 1], pack.joint_origin[i - 1], f[i])
    return f[0]


@njit(cache=True)
def _wrench_to_world(R, pos, f):
    out = np.empty(6)
    lin = mat3_vec(R, f[3:])
    out[:3] = mat3_vec(R, f[:3]) + cross3(pos, lin)
    out[3:] = lin
    return out


@njit(cache=True)
def step_kernel(pack, pos, quat, nu, theta, thetad, qdd, mode, dt):
    """Semi-implicit Euler step with a momentum-consistent base twist.

    Joints and pose follow :func:`integrate_kernel`. Unless the base is
    fixed, the new base twist is then re-solved so that the world momentum
    of the whole system equals ``p + dt * dp/dt`` evaluated at the start of
    the step. Momentum is then conserved to round-off when no external
    wrench acts, instead of drifting at first order in ``dt``.
    """
    pos2, q2, nu2, th2, thd2 = integrate_kernel(pos, quat, nu, theta, thetad, qdd, dt)
    if mode == 1:
        return pos2, q2, nu2, th2, thd2
    E, R_w, _ = kinematics(pack, quat, theta)
    v = body_velocities(pack, E, nu, thetad)
    rate = _wrench_to_world(R_w[0], pos, momentum_rate_body(pack, E, v, thetad, qdd))
    target = momentum_kernel(pack, pos, quat, nu, theta, thetad) + dt * rate
    E2, R2, _ = kinematics(pack, q2, th2)
    R = R2[0]
    # world wrench about the world origin -> base frame about the base origin
    f_b = np.empty(6)
    lin = target[3:]
    f_b[3:] = mat3T_vec(R, lin)
    f_b[:3] = mat3T_vec(R, target[:3] - cross3(pos2, lin))
    H = mass_matrix_kernel(pack, E2)
    rhs = f_b - np.ascontiguousarray(H[:6, 6:]) @ thd2
    x, ok = cholesky_solve(H[:6, :6].copy(), rhs)
    if ok:
        nu2 = x
    return pos2, q2, nu2, th2, thd2


@njit(cache=True)
def energy_kernel(pack, pos, quat, nu, theta, thetad):
    """Kinetic energy (rigid + added) and gravity/buoyancy potential."""
    E, R_w, p = kinematics(pack, quat, theta)
    v = body_velocities(pack, E, nu, thetad)
    kin = 0.0
    pot = 0.0
    for b in range(pack.n + 1):
        kin += 0.5 * np.dot(v[b], mat6_vec(pack.inertia_aug[b], v[b]))
        zc = pos[2] + p[b, 2] + np.dot(R_w[b, 2], pack.com[b])
        zb = pos[2] + p[b, 2] + np.dot(R_w[b, 2], pack.cob[b])
        pot += pack.mass[b] * pack.gravity * zc - pack.buoyancy[b] * zb
    return kin, pot


@njit(cache=True)
def momentum_kernel(pack, pos, quat, nu, theta, thetad):
    """Spatial momentum of the whole system in world axes about the world origin."""
    E, R_w, p = kinematics(pack, quat, theta)
    v = body_velocities(pack, E, nu, thetad)
    h = np.zeros(6)
    for b in range(pack.n + 1):
        hb = mat6_vec(pack.inertia_aug[b], v[b])
        lin = mat3_vec(R_w[b], hb[3:])
        ang = mat3_vec(R_w[b], hb[:3]) + cross3(pos + p[b], lin)
        h[:3] += ang
        h[3:] += lin
    return h


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------


def _external(model: VehicleArmModel, base_wrench, link_wrenches) -> np.ndarray:
    n = model.n_joints
    f = np.zeros((n + 1, 6))
    if base_wrench is not None:
        f[0] = base_wrench.expect(BODY).vector()
    if link_wrenches is not None:
        link_wrenches = list(link_wrenches)
        if len(link_wrenches) != n:
            raise ValueError(f"expected {n} link wrenches, got {len(link_wrenches)}")
        for i, w in enumerate(link_wrenches):
            f[i + 1] = w.expect(BODY).vector()
    return f


def _unpack(state: SystemState):
    return (
        np.array(state.pose.position),
        np.array(state.pose.orientation),
        state.twist.expect(BODY).vector(),
        np.array(state.q),
        np.array(state.qd),
    )


def mass_matrix(model: VehicleArmModel, state: SystemState) -> np.ndarray:
    E, _, _ = kinematics(model.pack, np.array(state.pose.orientation), np.array(state.q))
    return mass_matrix_kernel(model.pack, E)


def bias_forces(
    model: VehicleArmModel,
    state: SystemState,
    base_wrench: Wrench | None = None,
    link_wrenches: Sequence[Wrench] | None = None,
    gravity: bool = True,
) -> np.ndarray:
    """Generalised bias ``C`` so that ``H @ qdd + C = [0, joint torques]``."""
    pack = model.pack
    _, quat, nu, theta, thetad = _unpack(state)
    E, R_w, _ = kinematics(pack, quat, theta)
    v = body_velocities(pack, E, nu, thetad)
    f = _external(model, base_wrench, link_wrenches)
    if gravity:
        f = f + gravity_wrenches(pack, R_w)
    return bias_kernel(pack, E, v, thetad, f)


def forward_dynamics(
    model: VehicleArmModel,
    state: SystemState,
    joint_torques,
    base_wrench: Wrench | None = None,
    link_wrenches: Sequence[Wrench] | None = None,
    gravity: bool = True,
    base: str = "floating",
) -> tuple[np.ndarray, np.ndarray]:
    """Vehicle body acceleration (6) and joint accelerations.

    ``base="fixed"`` clamps the vehicle to the world; ``base="locked"``
    freezes the joints and moves the system as one rigid body. Wrenches
    are body-frame wrenches about each body's origin.
    """
    mode = _MODES[base]
    pack = model.pack
    _, quat, nu, theta, thetad = _unpack(state)
    tau = np.asarray(joint_torques, dtype=float).reshape(model.n_joints)
    f = _external(model, base_wrench, link_wrenches)
    qdd, ok = accelerations_kernel(pack, quat, nu, theta, thetad, tau, f, gravity, mode)
    if not ok:
        raise SingularMassMatrixError("mass matrix is singular or indefinite; check masses and inertias")
    return qdd[:6], qdd[6:]


def integrate_step(
    model: VehicleArmModel, state: SystemState, accelerations, dt: float = DEFAULT_DT, base: str = "floating"
) -> SystemState:
    """Advance one semi-implicit Euler step; ``accelerations`` is ``(base, joints)``
    or a flat vector of length ``6 + n``. ``base`` must match the mode the
    accelerations were computed in."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if isinstance(accelerations, tuple):
        qdd = np.concatenate([np.asarray(accelerations[0], float), np.asarray(accelerations[1], float)])
    else:
        qdd = np.asarray(accelerations, dtype=float)
    pos, quat, nu, theta, thetad = _unpack(state)
    pos2, q2, nu2, th2, thd2 = step_kernel(model.pack, pos, quat, nu, theta, thetad, qdd, _MODES[base], dt)
    parts = (pos2, q2, nu2, th2, thd2)
    if not all(np.all(np.isfinite(x)) for x in parts):
        raise SimulationAbort(
            f"non-finite state after integration: position={pos2}, quaternion={q2}, twist={nu2}, q={th2}, qd={thd2}"
        )
    return SystemState(Pose(pos2, q2), Twist.from_vector(nu2), th2, thd2)


def system_energy(model: VehicleArmModel, state: SystemState) -> tuple[float, float]:
    """(kinetic, potential) energy; potential counts gravity and buoyancy."""
    return energy_kernel(model.pack, *_unpack(state))


def spatial_momentum(model: VehicleArmModel, state: SystemState) -> np.ndarray:
    return momentum_kernel(model.pack, *_unpack(state))
