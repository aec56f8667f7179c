"""Joint-space quintic trajectories and the two PID loops.

Each joint follows its own quintic between a start and a goal waypoint
(position, velocity, zero acceleration at both ends). Joints are driven by
velocity PIDs whose output is torque limited and rate limited per control
step; the vehicle centre of mass is held in surge, sway and heave by a
position PID that outputs a body-frame force.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import PidGains, VehicleArmModel
from .spatial import Pose

# ---------------------------------------------------------------------------
# quintic kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def quintic_coefficients(q0, v0, qf, vf, T):
    """Ascending coefficients ``(n, 6)`` with zero boundary accelerations."""
    n = q0.shape[0]
    c = np.zeros((n, 6))
    T2 = T * T
    T3 = T2 * T
    for j in range(n):
        d = qf[j] - q0[j]
        c[j, 0] = q0[j]
        c[j, 1] = v0[j]
        c[j, 3] = (20.0 * d - (8.0 * vf[j] + 12.0 * v0[j]) * T) / (2.0 * T3)
        c[j, 4] = (-30.0 * d + (14.0 * vf[j] + 16.0 * v0[j]) * T) / (2.0 * T3 * T)
        c[j, 5] = (12.0 * d - 6.0 * (vf[j] + v0[j]) * T) / (2.0 * T3 * T2)
    return c


@njit(cache=True)
def quintic_eval(c, T, t):
    """Position, velocity and acceleration per joint; ``t > T`` holds the end point."""
    n = c.shape[0]
    q = np.empty(n)
    qd = np.empty(n)
    qdd = np.empty(n)
    if t >= T:
        for j in range(n):
            q[j] = c[j, 0] + T * (c[j, 1] + T * (c[j, 2] + T * (c[j, 3] + T * (c[j, 4] + T * c[j, 5]))))
            qd[j] = c[j, 1] + T * (2 * c[j, 2] + T * (3 * c[j, 3] + T * (4 * c[j, 4] + T * 5 * c[j, 5])))
            qdd[j] = 0.0
        return q, qd, qdd
    if t < 0.0:
        t = 0.0
    for j in range(n):
        q[j] = c[j, 0] + t * (c[j, 1] + t * (c[j, 2] + t * (c[j, 3] + t * (c[j, 4] + t * c[j, 5]))))
        qd[j] = c[j, 1] + t * (2 * c[j, 2] + t * (3 * c[j, 3] + t * (4 * c[j, 4] + t * 5 * c[j, 5])))
        qdd[j] = 2 * c[j, 2] + t * (6 * c[j, 3] + t * (12 * c[j, 4] + t * 20 * c[j, 5]))
    return q, qd, qdd


@njit(cache=True)
def _poly(c, x):
    s = 0.0
    for k in range(c.shape[0] - 1, -1, -1):
        s = s * x + c[k]
    return s


@njit(cache=True)
def _peak_abs(p, dp, T):
    """max |p(t)| on [0, T]; stationary points located as sign changes of ``dp``."""
    m = 64
    best = max(abs(_poly(p, 0.0)), abs(_poly(p, T)))
    prev_t = 0.0
    prev_v = _poly(dp, 0.0)
    for k in range(1, m + 1):
        t = T * k / m
        v = _poly(dp, t)
        if prev_v == 0.0:
            best = max(best, abs(_poly(p, prev_t)))
        elif prev_v * v < 0.0:
            a, b, fa = prev_t, t, prev_v
            for _ in range(80):
                mid = 0.5 * (a + b)
                fm = _poly(dp, mid)
                if fa * fm <= 0.0:
                    b = mid
                else:
                    a, fa = mid, fm
                if b - a <= 1e-15 * T:
                    break
            best = max(best, abs(_poly(p, 0.5 * (a + b))))
        prev_t, prev_v = t, v
    return best


@njit(cache=True)
def quintic_peaks(c, T):
    """Peak |velocity| and |acceleration| per joint over [0, T]."""
    n = c.shape[0]
    vel = np.empty(n)
    acc = np.empty(n)
    for j in range(n):
        v = np.array([c[j, 1], 2 * c[j, 2], 3 * c[j, 3], 4 * c[j, 4], 5 * c[j, 5]])
        a = np.array([2 * c[j, 2], 6 * c[j, 3], 12 * c[j, 4], 20 * c[j, 5]])
        jerk = np.array([6 * c[j, 3], 24 * c[j, 4], 60 * c[j, 5]])
        vel[j] = _peak_abs(v, a, T)
        acc[j] = _peak_abs(a, jerk, T)
    return vel, acc


@njit(cache=True)
def _feasible(q0, v0, qf, vf, T, vlim, alim):
    c = quintic_coefficients(q0, v0, qf, vf, T)
    vel, acc = quintic_peaks(c, T)
    for j in range(q0.shape[0]):
        if vel[j] > vlim[j] or acc[j] > alim[j]:
            return False
    return True


@njit(cache=True)
def minimum_duration(q0, v0, qf, vf, vlim, alim, floor):
    """Shortest duration >= ``floor`` meeting the velocity and acceleration limits (bisection)."""
    if _feasible(q0, v0, qf, vf, floor, vlim, alim):
        return floor
    lo = floor
    hi = 2.0 * floor
    while not _feasible(q0, v0, qf, vf, hi, vlim, alim):
        lo = hi
        hi *= 2.0
        if hi > 1e6:
            return np.nan
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _feasible(q0, v0, qf, vf, mid, vlim, alim):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-10 * hi:
            break
    return hi


# ---------------------------------------------------------------------------
# trajectory types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WaypointPair:
    start_q: np.ndarray
    start_qd: np.ndarray
    goal_q: np.ndarray
    goal_qd: np.ndarray

    def __post_init__(self):
        for name in ("start_q", "start_qd", "goal_q", "goal_qd"):
            a = np.array(getattr(self, name), dtype=float).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def position_channels(self) -> np.ndarray:
        return np.concatenate([self.start_q, self.goal_q])

    def velocity_channels(self) -> np.ndarray:
        return np.concatenate([self.start_qd, self.goal_qd])

    def check(self, model: VehicleArmModel, tol: float = 1e-9) -> None:
        for q in (self.start_q, self.goal_q):
            if np.any(q < model.lower - tol) or np.any(q > model.upper + tol):
                raise ValueError("waypoint position outside joint limits")
        for qd in (self.start_qd, self.goal_qd):
            if np.any(np.abs(qd) > model.velocity_limits + tol):
                raise ValueError("waypoint velocity outside velocity limits")


@dataclass(frozen=True, eq=False)
class QuinticSegment:
    coefficients: np.ndarray
    duration: float
    time_scale: float = 1.0

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).reshape(-1, 6)
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        if not self.duration > 0:
            raise ValueError("segment duration must be positive")

    @classmethod
    def from_waypoints(cls, wp: WaypointPair, duration: float, time_scale: float = 1.0) -> QuinticSegment:
        c = quintic_coefficients(
            np.array(wp.start_q), np.array(wp.start_qd), np.array(wp.goal_q), np.array(wp.goal_qd), float(duration)
        )
        return cls(c, float(duration), time_scale)

    def peaks(self) -> tuple[np.ndarray, np.ndarray]:
        return quintic_peaks(np.array(self.coefficients), self.duration)


def eval_quintic(seg: QuinticSegment, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(q, qd, qdd) at time ``t``; past the end the goal is held with qd = vf, qdd = 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return quintic_eval(np.array(seg.coefficients), seg.duration, float(t))


def plan_random_trajectory(
    model: VehicleArmModel, seed: int | np.random.Generator, start_q=None
) -> tuple[QuinticSegment, WaypointPair]:
    """Random reachable goal from the home pose at rest, randomly slowed by 1x-3x."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ctl = model.control
    lower, upper = model.lower, model.upper
    vlim, alim = model.velocity_limits, model.acceleration_limits
    start_q = np.array(model.home if start_q is None else start_q, dtype=float)
    start_qd = np.zeros(model.n_joints)
    goal_q = rng.uniform(lower, upper)
    frac = ctl.goal_velocity_fraction
    goal_qd = rng.uniform(-frac * vlim, frac * vlim)
    lo, hi = ctl.time_scale_range
    scale = float(rng.uniform(lo, hi))
    t_min = minimum_duration(start_q, start_qd, goal_q, goal_qd, vlim, alim, ctl.min_duration)
    if not np.isfinite(t_min):
        raise RuntimeError("no feasible duration found for the sampled waypoints")
    wp = WaypointPair(start_q, start_qd, goal_q, goal_qd)
    return QuinticSegment.from_waypoints(wp, scale * t_min, scale), wp


# ---------------------------------------------------------------------------
# PID
# ---------------------------------------------------------------------------


@njit(cache=True)
def pid_update(kp, ki, kd, ilim, olim, rlim, integ, prev_err, prev_out, err, dt):
    """One PID step, in place on the state arrays; returns the output."""
    n = err.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = integ[i] + err[i] * dt
        if s > ilim[i]:
            s = ilim[i]
        elif s < -ilim[i]:
            s = -ilim[i]
        integ[i] = s
        u = kp[i] * err[i] + ki[i] * s + kd[i] * (err[i] - prev_err[i]) / dt
        u = min(max(u, prev_out[i] - rlim[i]), prev_out[i] + rlim[i])
        u = min(max(u, -olim[i]), olim[i])
        prev_err[i] = err[i]
        prev_out[i] = u
        out[i] = u
    return out


@dataclass(eq=False)
class PidState:
    """Per-channel PID gains plus the mutable integrator/memory."""

    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    integral_limit: np.ndarray
    output_limit: np.ndarray
    rate_limit: np.ndarray
    integral: np.ndarray = field(default=None)
    prev_error: np.ndarray = field(default=None)
    prev_output: np.ndarray = field(default=None)

    def __post_init__(self):
        n = np.asarray(self.kp).size
        for name in ("kp", "ki", "kd", "integral_limit", "output_limit", "rate_limit"):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy())
        for name in ("integral", "prev_error", "prev_output"):
            v = getattr(self, name)
            setattr(self, name, np.zeros(n) if v is None else np.array(v, dtype=float).reshape(n))

    @classmethod
    def from_gains(cls, gains: PidGains, output_limit=np.inf, rate_limit=np.inf) -> PidState:
        return cls(gains.kp, gains.ki, gains.kd, gains.integral_limit, output_limit, rate_limit)

    def warm_start(self, output) -> None:
        """Preload the integrator so a zero error reproduces ``output``."""
        output = np.asarray(output, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            integ = np.where(self.ki != 0, output / self.ki, 0.0)
        self.integral = np.clip(integ, -self.integral_limit, self.integral_limit)
        self.prev_output = np.clip(self.ki * self.integral, -self.output_limit, self.output_limit)
        self.prev_error = np.zeros_like(self.prev_error)

    def step(self, error, dt: float) -> np.ndarray:
        if not dt > 0:
            raise ValueError("dt must be positive")
        err = np.asarray(error, dtype=float).reshape(self.kp.shape)
        return pid_update(
            self.kp,
            self.ki,
            self.kd,
            self.integral_limit,
            self.output_limit,
            self.rate_limit,
            self.integral,
            self.prev_error,
            self.prev_output,
            err,
            float(dt),
        )


def joint_pid_state(model: VehicleArmModel) -> PidState:
    return PidState.from_gains(model.control.joint, model.torque_limits, model.torque_rate_limits)


def station_pid_state(model: VehicleArmModel) -> PidState:
    return PidState.from_gains(model.control.station)


def joint_velocity_pid(pid: PidState, desired_qd, actual_qd, dt: float) -> np.ndarray:
    """Joint torques from the velocity error, torque and rate limited."""
    return pid.step(np.asarray(desired_qd, float) - np.asarray(actual_qd, float), dt)


def station_keeping_pid(pid: PidState, pose: Pose, setpoint, dt: float) -> np.ndarray:
    """Body-frame force holding the vehicle origin at a world ``setpoint``; no moments."""
    err_world = np.asarray(setpoint, dtype=float) - pose.position
    return pid.step(pose.rotation.T @ err_world, dt)

