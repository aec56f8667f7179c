"""Episode runner: trajectory, controllers, hydrodynamics and dynamics at 1 kHz.

One episode starts from the passive equilibrium with the arm at home, tracks
a random quintic joint trajectory with the joint velocity PIDs while the
station-keeping PID holds the vehicle position, keeps simulating for a
settle period after the trajectory ends, and records the 24 continuous
streams plus the 16 waypoint constants.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numba import njit

from . import channels
from .control import (
    PidState,
    QuinticSegment,
    WaypointPair,
    joint_pid_state,
    pid_update,
    plan_random_trajectory,
    quintic_eval,
    station_pid_state,
)
from .dynamics import (
    DEFAULT_DT,
    LOCKED_JOINTS,
    FLOATING,
    SystemState,
    bias_forces,
    bias_kernel,
    body_velocities,
    gravity_wrenches,
    kinematics,
    mass_matrix_kernel,
    solve_accelerations,
    step_kernel,
)
from .hydrodynamics import hydro_wrenches_kernel, link_wrenches, vehicle_wrench
from .model import VehicleArmModel
from .spatial import Pose, Twist, mat3T_vec, quaternions_to_rpy

log = logging.getLogger(__name__)

OK, NON_FINITE, SINGULAR = 0, 1, 2
STATUS_NAMES = {OK: "ok", NON_FINITE: "non-finite state", SINGULAR: "singular mass matrix"}

EQUILIBRIUM_TOL = 1e-5
EQUILIBRIUM_HOLD = 1.0
EQUILIBRIUM_MAX_TIME = 120.0


class EpisodeAborted(RuntimeError):
    def __init__(self, seed, reason):
        super().__init__(f"episode {seed} aborted: {reason}")
        self.seed = seed
        self.reason = reason


class UnstableModelError(RuntimeError):
    """The passive equilibrium search did not converge."""


class DatasetRejectionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# compiled closed loop
# ---------------------------------------------------------------------------


@njit(cache=True)
def rollout_kernel(
    pack,
    pos,
    quat,
    nu,
    theta,
    thetad,
    coeffs,
    T,
    track,
    tau_const,
    jg,
    j_state,
    station,
    sg,
    s_state,
    setpoint,
    extra_damping,
    mode,
    dt,
    n_steps,
    record_every,
    settle_tol,
    settle_steps,
):
    """Closed-loop simulation of up to ``n_steps`` steps.

    ``jg``/``sg`` stack PID gains as rows (kp, ki, kd, integral limit,
    output limit, rate limit); ``j_state``/``s_state`` stack (integral,
    previous error, previous output) and are updated in place. With
    ``settle_steps > 0`` the loop stops once every vehicle twist component
    stays below ``settle_tol`` for that many consecutive steps.
    """
    n = pack.n
    n_rec = n_steps // record_every + 1
    rec = np.zeros((n_rec, 13 + 3 * n))
    torques = np.zeros((n_rec, n))
    forces = np.zeros((n_rec, 3))
    status = 0
    calm = 0
    r = 0
    zero_n = np.zeros(n)
    F = np.zeros(3)
    for k in range(n_steps + 1):
        t = k * dt
        if track and t <= T:
            _, qd_des, _ = quintic_eval(coeffs, T, t)
        else:
            qd_des = zero_n
        if track:
            tau = pid_update(
                jg[0], jg[1], jg[2], jg[3], jg[4], jg[5], j_state[0], j_state[1], j_state[2], qd_des - thetad, dt
            )
        else:
            tau = tau_const
        E, R_w, p = kinematics(pack, quat, theta)
        if station:
            err = mat3T_vec(R_w[0], setpoint - pos)
            F = pid_update(sg[0], sg[1], sg[2], sg[3], sg[4], sg[5], s_state[0], s_state[1], s_state[2], err, dt)
        if k % record_every == 0:
            rec[r, 0:3] = pos
            rec[r, 3:6] = nu[3:]
            rec[r, 6:10] = quat
            rec[r, 10:13] = nu[:3]
            rec[r, 13 : 13 + n] = theta
            rec[r, 13 + n : 13 + 2 * n] = thetad
            rec[r, 13 + 2 * n : 13 + 3 * n] = qd_des
            torques[r] = tau
            forces[r] = F
            r += 1
        if k == n_steps:
            break
        v = body_velocities(pack, E, nu, thetad)
        f = hydro_wrenches_kernel(pack, R_w, v) + gravity_wrenches(pack, R_w)
        for i in range(3):
            f[0, 3 + i] += F[i]
        for i in range(6):
            f[0, i] -= extra_damping[i] * nu[i]
        H = mass_matrix_kernel(pack, E)
        C = bias_kernel(pack, E, v, thetad, f)
        qdd, ok = solve_accelerations(H, C, tau, mode)
        if not ok:
            status = 2
            break
        pos, quat, nu, theta, thetad = step_kernel(pack, pos, quat, nu, theta, thetad, qdd, mode, dt)
        finite = math.isfinite(quat[0]) and math.isfinite(pos[0]) and math.isfinite(pos[1]) and math.isfinite(pos[2])
        for i in range(6):
            finite = finite and math.isfinite(nu[i])
        for i in range(n):
            finite = finite and math.isfinite(theta[i]) and math.isfinite(thetad[i])
        if not finite:
            status = 1
            break
        if settle_steps > 0:
            mx = 0.0
            for i in range(6):
                mx = max(mx, abs(nu[i]))
            if mx < settle_tol:
                calm += 1
                if calm >= settle_steps:
                    break
            else:
                calm = 0
    return rec[:r], torques[:r], forces[:r], pos, quat, nu, theta, thetad, status


def _gain_rows(pid: PidState) -> np.ndarray:
    return np.array([pid.kp, pid.ki, pid.kd, pid.integral_limit, pid.output_limit, pid.rate_limit])


def _state_rows(pid: PidState) -> np.ndarray:
    return np.array([pid.integral, pid.prev_error, pid.prev_output])


@dataclass
class Rollout:
    """Raw output of :func:`rollout`."""

    time: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    quaternion: np.ndarray
    angular_velocity: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qd_desired: np.ndarray
    torque: np.ndarray
    station_force: np.ndarray
    final: SystemState
    status: int

    @property
    def rpy(self) -> np.ndarray:
        return quaternions_to_rpy(self.quaternion)


def rollout(
    model: VehicleArmModel,
    state: SystemState,
    n_steps: int,
    *,
    segment: QuinticSegment | None = None,
    joint_pid: PidState | None = None,
    joint_torques=None,
    station_pid: PidState | None = None,
    setpoint=None,
    mode: int = FLOATING,
    extra_damping=None,
    dt: float = DEFAULT_DT,
    record_every: int = 1,
    settle_tol: float = 0.0,
    settle_steps: int = 0,
) -> Rollout:
    """Run the compiled closed loop from ``state``.

    With a ``segment`` the joints track its velocity profile through
    ``joint_pid`` (zero desired velocity after the segment ends); otherwise
    constant ``joint_torques`` are applied. ``station_pid`` enables station
    keeping at ``setpoint`` (default: the initial position). PID states are
    updated in place.
    """
    n = model.n_joints
    track = segment is not None
    if track and joint_pid is None:
        joint_pid = joint_pid_state(model)
    coeffs = np.array(segment.coefficients) if track else np.zeros((n, 6))
    T = float(segment.duration) if track else 0.0
    jp = joint_pid if joint_pid is not None else joint_pid_state(model)
    station = station_pid is not None
    sp = station_pid if station else station_pid_state(model)
    if setpoint is None:
        setpoint = state.pose.position
    tau_const = np.zeros(n) if joint_torques is None else np.asarray(joint_torques, dtype=float).reshape(n)
    damping = np.zeros(6) if extra_damping is None else np.asarray(extra_damping, dtype=float).reshape(6)
    j_state = _state_rows(jp)
    s_state = _state_rows(sp)
    out = rollout_kernel(
        model.pack,
        np.array(state.pose.position),
        np.array(state.pose.orientation),
        state.twist.vector(),
        np.array(state.q),
        np.array(state.qd),
        coeffs,
        T,
        track,
        tau_const,
        _gain_rows(jp),
        j_state,
        station,
        _gain_rows(sp),
        s_state,
        np.asarray(setpoint, dtype=float),
        damping,
        int(mode),
        float(dt),
        int(n_steps),
        int(record_every),
        float(settle_tol),
        int(settle_steps),
    )
    rec, torques, forces, pos, quat, nu, theta, thetad, status = out
    jp.integral, jp.prev_error, jp.prev_output = j_state[0].copy(), j_state[1].copy(), j_state[2].copy()
    sp.integral, sp.prev_error, sp.prev_output = s_state[0].copy(), s_state[1].copy(), s_state[2].copy()
    final = SystemState(Pose(pos, quat), Twist.from_vector(nu), theta, thetad)
    return Rollout(
        time=np.arange(len(rec)) * dt * record_every,
        position=rec[:, 0:3],
        velocity=rec[:, 3:6],
        quaternion=rec[:, 6:10],
        angular_velocity=rec[:, 10:13],
        q=rec[:, 13 : 13 + n],
        qd=rec[:, 13 + n : 13 + 2 * n],
        qd_desired=rec[:, 13 + 2 * n :],
        torque=torques,
        station_force=forces,
        final=final,
        status=int(status),
    )


# ---------------------------------------------------------------------------
# equilibrium
# ---------------------------------------------------------------------------


def static_loads(model: VehicleArmModel, state: SystemState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(base moment residual, station force, joint holding torques) at ``state``.

    The body-frame force the station-keeping loop must supply and the joint
    torques that hold the arm still, both from the bias forces with gravity,
    buoyancy and hydrodynamics at the given (typically resting) state.
    """
    C = bias_forces(model, state, vehicle_wrench(model, state), link_wrenches(model, state))
    return C[:3], C[3:6], C[6:]


def warm_controllers(model: VehicleArmModel, state: SystemState) -> tuple[PidState, PidState]:
    """Joint and station PIDs preloaded to hold ``state`` without a transient."""
    _, force, hold = static_loads(model, state)
    jp = joint_pid_state(model)
    jp.warm_start(hold)
    sp = station_pid_state(model)
    sp.warm_start(force)
    return jp, sp


_EQUILIBRIA: dict[tuple, SystemState] = {}


def find_passive_equilibrium(model: VehicleArmModel, q=None, dt: float = DEFAULT_DT) -> SystemState:
    """Settle the vehicle with the arm locked at ``q`` (default home).

    Station keeping is on and extra base damping speeds up settling. The
    search stops once the vehicle twist stays below 1e-5 for one simulated
    second and fails after 120 s. Results are cached per static
    configuration; drag and added mass do not move the equilibrium.
    """
    q = np.array(model.home if q is None else q, dtype=float)
    key = (model.statics_fingerprint, tuple(np.round(q, 12)), dt)
    if key in _EQUILIBRIA:
        return _EQUILIBRIA[key]
    start = SystemState.at_rest(q)
    _, force, _ = static_loads(model, start)
    if not _restoring_ok(model, start):
        raise UnstableModelError("centre of buoyancy is not above the centre of mass; no restoring moment")
    sp = station_pid_state(model)
    sp.warm_start(force)
    hold = int(round(EQUILIBRIUM_HOLD / dt))
    out = rollout(
        model,
        start,
        int(round(EQUILIBRIUM_MAX_TIME / dt)),
        station_pid=sp,
        setpoint=np.zeros(3),
        mode=LOCKED_JOINTS,
        extra_damping=model.control.equilibrium_damping,
        dt=dt,
        record_every=1000,
        settle_tol=EQUILIBRIUM_TOL,
        settle_steps=hold,
    )
    if out.status != OK:
        raise UnstableModelError(f"equilibrium search failed: {STATUS_NAMES[out.status]}")
    if np.max(np.abs(out.final.twist.vector())) >= EQUILIBRIUM_TOL:
        raise UnstableModelError(f"vehicle did not settle within {EQUILIBRIUM_MAX_TIME:.0f} s")
    eq = out.final
    _EQUILIBRIA[key] = eq
    return eq


def _restoring_ok(model: VehicleArmModel, state: SystemState) -> bool:
    """Total buoyancy acts above the total weight (metacentric height > 0)."""
    pack = model.pack
    _, R_w, p = kinematics(pack, np.array(state.pose.orientation), np.array(state.q))
    zg = sum(pack.mass[b] * (p[b, 2] + R_w[b, 2] @ pack.com[b]) for b in range(pack.n + 1)) / pack.mass.sum()
    B = pack.buoyancy.sum()
    if B <= 0:
        return False
    zb = sum(pack.buoyancy[b] * (p[b, 2] + R_w[b, 2] @ pack.cob[b]) for b in range(pack.n + 1)) / B
    return bool(zb > zg)


def clear_equilibrium_cache() -> None:
    _EQUILIBRIA.clear()


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    seed: int = 0
    settle_time: float = 2.0
    physics_rate: int = 1000
    record_rate: int = 1000

    def __post_init__(self):
        if self.physics_rate % self.record_rate:
            raise ValueError("physics rate must be divisible by the record rate")
        if self.settle_time < 0:
            raise ValueError("settle time must be non-negative")


@dataclass(eq=False)
class Episode:
    """Recorded streams of one trajectory.

    ``series`` holds the 24 continuous channels (rows are samples at
    ``rate`` Hz), ``constants`` the 16 waypoint channels.
    """

    series: np.ndarray
    constants: np.ndarray
    rate: float
    seed: int
    duration: float
    model_fingerprint: str
    meta: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=float)
        self.constants = np.asarray(self.constants, dtype=float).reshape(-1)
        if self.series.ndim != 2 or self.series.shape[1] != len(channels.CONTINUOUS):
            raise ValueError(f"expected {len(channels.CONTINUOUS)} continuous channels, got {self.series.shape}")
        if self.constants.shape != (len(channels.CONSTANT),):
            raise ValueError(f"expected {len(channels.CONSTANT)} constant channels")

    def __len__(self) -> int:
        return self.series.shape[0]

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) / self.rate

    def channel(self, name: str) -> np.ndarray:
        if name in channels.CONTINUOUS:
            return self.series[:, channels.CONTINUOUS.index(name)]
        return np.full(len(self), self.constants[channels.CONSTANT.index(name)])

    @property
    def pitch(self) -> np.ndarray:
        return self.channel(channels.PITCH)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.series)) and np.all(np.isfinite(self.constants)))

    def replace(self, **kw) -> Episode:
        d = dict(
            series=self.series,
            constants=self.constants,
            rate=self.rate,
            seed=self.seed,
            duration=self.duration,
            model_fingerprint=self.model_fingerprint,
            meta=dict(self.meta),
            aux=dict(self.aux),
        )
        d.update(kw)
        return Episode(**d)

    # -- files ---------------------------------------------------------------
    def header(self) -> dict:
        return {
            "format": "uvms-episode/1",
            "channels": list(channels.CONTINUOUS),
            "constants": list(channels.CONSTANT),
            "units": channels.UNITS,
            "groups": {gid: g.name for gid, g in channels.FEATURE_GROUPS.items()},
            "rate_hz": self.rate,
            "seed": self.seed,
            "duration_s": self.duration,
            "model_fingerprint": self.model_fingerprint,
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        path = Path(path)
        arrays = {f"aux_{k}": np.asarray(v) for k, v in self.aux.items()}
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.array(json.dumps(self.header(), sort_keys=True)),
                series=self.series,
                constants=self.constants,
                **arrays,
            )
        return path

    @classmethod
    def load(cls, path) -> Episode:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header["channels"] != list(channels.CONTINUOUS):
                raise ValueError(f"{path}: unexpected channel layout")
            aux = {k[4:]: z[k] for k in z.files if k.startswith("aux_")}
            return cls(
                series=z["series"],
                constants=z["constants"],
                rate=header["rate_hz"],
                seed=header["seed"],
                duration=header["duration_s"],
                model_fingerprint=header["model_fingerprint"],
                meta=header.get("meta", {}),
                aux=aux,
            )


def _desired_velocity(segment: QuinticSegment, t: np.ndarray) -> np.ndarray:
    c = np.array(segment.coefficients)
    out = np.zeros((len(t), c.shape[0]))
    for i, ti in enumerate(t):
        if ti <= segment.duration:
            out[i] = quintic_eval(c, segment.duration, float(ti))[1]
    return out


def run_episode(
    model: VehicleArmModel,
    config: EpisodeConfig,
    segment: QuinticSegment | None = None,
    waypoints: WaypointPair | None = None,
    keep_aux: bool = True,
) -> Episode:
    """Simulate one episode; ``segment``/``waypoints`` override the random plan."""
    dt = 1.0 / config.physics_rate
    eq = find_passive_equilibrium(model, dt=dt)
    if segment is None:
        segment, waypoints = plan_random_trajectory(model, config.seed, start_q=eq.q)
    elif waypoints is None:
        raise ValueError("waypoints are required with an explicit segment")
    n_steps = int(round((segment.duration + config.settle_time) / dt))
    every = config.physics_rate // config.record_rate
    jp, sp = warm_controllers(model, eq)
    out = rollout(
        model,
        eq,
        n_steps,
        segment=segment,
        joint_pid=jp,
        station_pid=sp,
        setpoint=eq.pose.position,
        dt=dt,
        record_every=every,
    )
    if out.status != OK:
        raise EpisodeAborted(config.seed, STATUS_NAMES[out.status])
    rpy = out.rpy
    series = np.column_stack([out.position, out.velocity, rpy, out.angular_velocity, out.q, out.qd, out.qd_desired])
    constants = np.concatenate([waypoints.position_channels(), waypoints.velocity_channels()])
    eq_pitch = float(rpy[0, 1])
    dev = np.linalg.norm(out.position - eq.pose.position, axis=1)
    meta = {
        "trajectory_duration_s": float(segment.duration),
        "time_scale": float(segment.time_scale),
        "settle_time_s": config.settle_time,
        "physics_rate_hz": config.physics_rate,
        "equilibrium_pitch": eq_pitch,
        "max_pitch_excursion": float(np.max(np.abs(rpy[:, 1] - eq_pitch))),
        "max_station_error_m": float(dev.max()),
        "station_within_radius": float(np.mean(dev <= model.control.station_radius)),
        "max_abs_torque": np.max(np.abs(out.torque), axis=0).tolist(),
        "max_torque_step": np.max(np.abs(np.diff(out.torque, axis=0)), axis=0, initial=0.0).tolist(),
        "pipeline": [f"simulate@{config.physics_rate}Hz", f"record@{config.record_rate}Hz"],
    }
    aux = {"quaternion": out.quaternion, "torque": out.torque, "station_force": out.station_force} if keep_aux else {}
    ep = Episode(series, constants, float(config.record_rate), int(config.seed), float(segment.duration), model.fingerprint, meta, aux)
    if not ep.is_finite():
        raise EpisodeAborted(config.seed, "non-finite recorded value")
    return ep


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _episode_job(args):
    model, config, transform, keep_aux = args
    try:
        ep = run_episode(model, config, keep_aux=keep_aux)
    except EpisodeAborted as exc:
        return config.seed, None, exc.reason
    if transform is not None:
        ep = transform(ep)
    return config.seed, ep, None


@dataclass
class GeneratedDataset:
    episodes: list[Episode]
    rejected: dict[int, str]

    @property
    def seeds(self) -> list[int]:
        return [e.seed for e in self.episodes]


def generate_dataset(
    model: VehicleArmModel,
    n: int,
    base_seed: int = 0,
    *,
    settle_time: float = 2.0,
    physics_rate: int = 1000,
    record_rate: int = 1000,
    transform: Callable[[Episode], Episode] | None = None,
    threads: int = 1,
    out_dir=None,
    keep_aux: bool = False,
    max_rejection: float = 0.05,
) -> GeneratedDataset:
    """Simulate episodes with seeds ``base_seed .. base_seed + n - 1``.

    ``transform`` runs on each episode right after simulation (in the worker),
    e.g. smoothing and downsampling, so 1 kHz records need not be kept.
    Results are ordered by seed regardless of ``threads``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    find_passive_equilibrium(model, dt=1.0 / physics_rate)
    jobs = [
        (model, EpisodeConfig(base_seed + i, settle_time, physics_rate, record_rate), transform, keep_aux)
        for i in range(n)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_episode_job, jobs))
    else:
        results = [_episode_job(j) for j in jobs]
    episodes = [ep for _, ep, _ in results if ep is not None]
    rejected = {seed: reason for seed, _, reason in results if reason is not None}
    for seed, reason in rejected.items():
        log.warning("episode %d rejected: %s", seed, reason)
    if out_dir is not None:
        write_episodes(out_dir, episodes, rejected)
    if len(rejected) > max_rejection * n:
        raise DatasetRejectionError(f"{len(rejected)} of {n} episodes aborted (limit {max_rejection:.0%})")
    return GeneratedDataset(episodes, rejected)


def write_episodes(out_dir, episodes: list[Episode], rejected: dict[int, str] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ep in episodes:
        name = f"episode_{ep.seed:06d}.npz"
        ep.save(out / name)
        entries.append({"seed": ep.seed, "file": name, "status": "ok", "samples": len(ep)})
    for seed, reason in sorted((rejected or {}).items()):
        entries.append({"seed": seed, "file": None, "status": f"rejected: {reason}"})
    entries.sort(key=lambda e: e["seed"])
    manifest = {
        "episodes": entries,
        "n_ok": len(episodes),
        "n_rejected": len(rejected or {}),
        "model_fingerprint": episodes[0].model_fingerprint if episodes else None,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_episodes(in_dir) -> list[Episode]:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    return [Episode.load(d / e["file"]) for e in manifest["episodes"] if e["status"] == "ok"]


def default_threads() -> int:
    return os.cpu_count() or 1
