"""Self-checks runnable without pytest: physics invariants and gradient checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channels as ch
from . import nn
from .dynamics import SystemState, forward_dynamics, integrate_step, spatial_momentum, system_energy
from .hydrodynamics import coriolis_added, link_wrenches, vehicle_wrench
from .model import VehicleArmModel, default_model
from .spatial import BODY, Pose, Twist


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} (limit {self.limit:.0e})"


def _moving_state(model: VehicleArmModel, rng, pitch=0.15) -> SystemState:
    pose = Pose.from_rpy(0.05, pitch, 0.3, position=(0.0, 0.0, -0.2))
    twist = Twist(rng.uniform(-0.4, 0.4, 3), rng.uniform(-0.2, 0.2, 3), BODY)
    q = np.array(model.home) + rng.uniform(-0.2, 0.2, model.n_joints)
    return SystemState(pose, twist, q, rng.uniform(-0.5, 0.5, model.n_joints))


def quaternion_drift(model: VehicleArmModel | None = None, steps: int = 2000, seed: int = 0) -> Check:
    """Largest per-step change of the quaternion norm away from one."""
    model = model or default_model()
    rng = np.random.default_rng(seed)
    state = _moving_state(model, rng)
    state = SystemState(state.pose, Twist([1.5, -2.0, 3.0], [0.1, 0.0, 0.0], BODY), state.q, state.qd)
    worst = 0.0
    for _ in range(steps):
        acc = forward_dynamics(model, state, np.zeros(model.n_joints), vehicle_wrench(model, state), link_wrenches(model, state))
        state = integrate_step(model, state, acc)
        worst = max(worst, abs(np.linalg.norm(state.pose.orientation) - 1.0))
    return Check("quaternion norm drift per step", worst < 1e-9, worst, 1e-9)


def coriolis_power(trials: int = 1000, seed: int = 0) -> Check:
    """Power of the added-mass Coriolis wrench for random symmetric M_A and twists."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        A = rng.standard_normal((6, 6))
        M = A @ A.T + np.eye(6)
        nu = rng.standard_normal(6) * rng.uniform(0.1, 10)
        w = coriolis_added(M, Twist.from_vector(nu)).vector()
        scale = np.linalg.norm(M) * (nu @ nu) * np.linalg.norm(nu)
        worst = max(worst, abs(w @ nu) / scale)
    return Check("added-mass Coriolis power (relative)", worst < 1e-10, worst, 1e-10)


def energy_decay(model: VehicleArmModel | None = None, duration: float = 3.0, dt: float = 1e-3, seed: int = 1) -> Check:
    """Unforced, hydrodynamically damped system: mechanical energy never rises.

    Increases are measured per step relative to the energy above the
    lowest value reached.
    """
    model = model or default_model()
    state = _moving_state(model, np.random.default_rng(seed))
    E = [sum(system_energy(model, state))]
    for _ in range(int(round(duration / dt))):
        acc = forward_dynamics(model, state, np.zeros(model.n_joints), vehicle_wrench(model, state), link_wrenches(model, state))
        state = integrate_step(model, state, acc, dt)
        E.append(sum(system_energy(model, state)))
    E = np.array(E)
    scale = E[0] - E.min()
    rise = np.max(np.diff(E)) / scale
    return Check("damped energy rise per step (relative)", rise < 1e-4, max(rise, 0.0), 1e-4)


def momentum_conservation(model: VehicleArmModel | None = None, duration: float = 5.0, dt: float = 1e-3, seed: int = 2) -> Check:
    """Without gravity and water, internal joint torques leave world momentum unchanged."""
    model = (model or default_model()).in_vacuum()
    state = _moving_state(model, np.random.default_rng(seed))
    p0 = spatial_momentum(model, state)
    worst = 0.0
    n = int(round(duration / dt))
    for k in range(n):
        tau = np.array([0.05, 0.05, 0.02, 5e-4]) * np.sin(np.arange(1, 5) * k * dt)
        acc = forward_dynamics(model, state, tau, gravity=False)
        state = integrate_step(model, state, acc, dt)
        worst = max(worst, np.max(np.abs(spatial_momentum(model, state) - p0)) / np.linalg.norm(p0))
    return Check("spatial momentum drift over 5 s (relative)", worst < 1e-4, worst, 1e-4)


def physics_checks(model: VehicleArmModel | None = None) -> list[Check]:
    model = model or default_model()
    return [quaternion_drift(model), coriolis_power(), energy_decay(model), momentum_conservation(model)]


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def numeric_gradients(net: nn.Net, loss, eps: float = 1e-5) -> dict:
    out = {}
    for name, p in net.params.items():
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + eps
            up = loss()
            p[i] = orig - eps
            down = loss()
            p[i] = orig
            g[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def _toy_sequences(rng, widths, lengths=(9, 6, 7)):
    return [rng.standard_normal((T, widths)) for T in lengths]


def gradient_errors(seed: int = 0) -> dict[str, float]:
    """Largest relative error per parameter tensor of both architectures."""
    rng = np.random.default_rng(seed)
    chans = (ch.PITCH, ch.PITCH_RATE, "joint2_position", "joint2_desired_velocity")
    errs = {}

    net = nn.PitchOnlyNet(chans, k=3, units=5, stride=2, seed=seed)
    X, Y, M = net.batch(_toy_sequences(rng, len(chans)))
    _, g = net.loss_and_grad(X, Y, M)
    fd = numeric_gradients(net, lambda: net.loss(X, Y, M))
    errs.update({f"pitch/{k}": relative_error(g[k], fd[k]) for k in g})

    wps = ("joint2_goal_position", "joint2_goal_velocity")
    net = nn.AutoregressiveNet(chans, units=5, waypoint_channels=wps, seed=seed)
    seqs = _toy_sequences(rng, len(chans))
    X, Y, M, wp = net.teacher_batch(seqs, [rng.standard_normal(2) for _ in seqs])
    fb = np.zeros(X.shape[:2], dtype=bool)
    fb[0, 3:7] = True
    fb[2, 2:5] = True
    _, g = net.loss_and_grad(X, Y, M, wp, fb)
    fd = numeric_gradients(net, lambda: net.loss(X, Y, M, wp, fb))
    errs.update({f"auto/{k}": relative_error(g[k], fd[k]) for k in g})
    return errs


def gradient_checks(seed: int = 0, limit: float = 1e-4) -> list[Check]:
    return [Check(f"gradient {k}", v < limit, v, limit) for k, v in gradient_errors(seed).items()]


def run_all(model: VehicleArmModel | None = None) -> list[Check]:
    return physics_checks(model) + gradient_checks()
