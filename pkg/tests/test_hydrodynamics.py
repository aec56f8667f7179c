import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import coriolis_added_oracle, restoring_world_oracle

from uvms_pitch.dynamics import SystemState, kinematics
from uvms_pitch.hydrodynamics import (
    PERTURBATION_GROUPS,
    PerturbationSpec,
    coriolis_added,
    cylinder_added_mass,
    drag_vehicle,
    link_wrenches,
    perturb,
    restoring,
    vehicle_wrench,
)
from uvms_pitch.spatial import Pose, Twist

vec6 = st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6)


def test_coriolis_zero_twist():
    assert np.all(coriolis_added(np.diag([10, 20, 30, 1, 2, 3.0]), Twist()).vector() == 0)


def test_coriolis_power_neutral_1000_pairs(rng):
    for _ in range(1000):
        A = rng.standard_normal((6, 6))
        M = A @ A.T
        nu = rng.standard_normal(6) * rng.uniform(0.01, 10)
        w = coriolis_added(M, Twist.from_vector(nu)).vector()
        assert abs(w @ nu) <= 1e-10 * max(1.0, np.linalg.norm(M) * np.linalg.norm(nu) ** 3)


def test_coriolis_matches_matrix_assembly_pure_surge():
    # angular first, so surge is component 3; the layout is (roll, pitch, yaw, surge, sway, heave)
    M = np.diag([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
    nu = np.array([0, 0, 0, 1.0, 0, 0])
    assert np.allclose(coriolis_added(M, Twist.from_vector(nu)).vector(), coriolis_added_oracle(M, nu), atol=1e-14)


def test_coriolis_matches_matrix_assembly_general(rng):
    for _ in range(50):
        A = rng.standard_normal((6, 6))
        M = A + A.T
        nu = rng.standard_normal(6)
        assert np.allclose(coriolis_added(M, Twist.from_vector(nu)).vector(), coriolis_added_oracle(M, nu), atol=1e-12)


def test_coriolis_munk_moment_sign():
    # more sway than surge added mass, moving forward with the flow coming from
    # the left: the Munk moment turns the nose further right, away from the flow
    M = np.diag([0.0, 0.0, 0.0, 2.0, 10.0, 10.0])
    nu = np.array([0, 0, 0, 1.0, 0.1, 0])
    w = coriolis_added(M, Twist.from_vector(nu)).vector()
    assert w[2] < 0


def test_drag_arithmetic():
    Dl, Dq = np.zeros(6), np.zeros(6)
    Dl[3], Dq[3] = 5.0, 20.0
    w = drag_vehicle(Dl, Dq, Twist.from_vector([0, 0, 0, 1.0, 0, 0]))
    assert w.force[0] == -25.0
    assert np.all(drag_vehicle(Dl, Dq, Twist()).vector() == 0)


@settings(max_examples=200, deadline=None)
@given(vec6, st.lists(st.floats(0, 50), min_size=6, max_size=6), st.lists(st.floats(0, 50), min_size=6, max_size=6))
def test_drag_never_adds_power(nu, lin, quad):
    w = drag_vehicle(lin, quad, Twist.from_vector(nu))
    assert w.vector() @ np.array(nu) <= 0


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-1.5, 1.5), st.floats(-3, 3), st.floats(1, 500))
def test_neutral_coincident_restoring_is_zero(r, p, y, W):
    c = [0.01, -0.02, 0.03]
    assert np.allclose(restoring(Pose.from_rpy(r, p, y), W, W, c, c).vector(), 0, atol=1e-12)


@pytest.mark.parametrize("theta", [0.02, 0.1, -0.1])
def test_metacentric_restoring_moment(theta):
    B, h = 200.0, 0.05
    w = restoring(Pose.from_rpy(0.0, theta, 0.0), B, B, [0, 0, 0], [0, 0, h])
    # restoring: the moment opposes the pitch angle
    assert np.sign(w.torque[1]) == -np.sign(theta)
    assert math.isclose(abs(w.torque[1]), B * h * math.sin(abs(theta)), rel_tol=1e-12)
    assert abs(w.torque[0]) < 1e-12 and abs(w.torque[2]) < 1e-12


def test_restoring_matches_world_frame_summation(model):
    pose = Pose.from_rpy(math.radians(10), 0.0, 0.0)
    W = model.vehicle.mass * model.gravity
    B = model.hydro.buoyancy[0]
    r_g, r_b = model.vehicle.com, model.hydro.buoyancy_centers[0]
    got = restoring(pose, W, B, r_g, r_b).vector()
    assert np.allclose(got, restoring_world_oracle(pose.rotation, W, B, r_g, r_b), atol=1e-12)
    # roll restored as well
    assert got[0] < 0


def test_link_wrenches_at_rest_are_buoyancy_only(model):
    pose = Pose.from_rpy(0.05, -0.1, 0.4)
    state = SystemState(pose, Twist(), model.home, np.zeros(4))
    _, R_w, _ = kinematics(model.pack, np.array(pose.orientation), np.array(model.home))
    for i, w in enumerate(link_wrenches(model, state)):
        # rotate the world buoyancy into the link frame
        f = R_w[i + 1].T @ np.array([0, 0, model.hydro.buoyancy[i + 1]])
        tau = np.cross(model.hydro.buoyancy_centers[i + 1], f)
        assert np.allclose(w.vector(), np.concatenate([tau, f]), atol=1e-12)


def test_single_spinning_joint_drag_by_hand(model):
    # only the first link has drag; vehicle still, yaw joint spinning at omega
    h = model.hydro.zeroed()
    quad = np.zeros_like(h.link_quadratic_drag)
    quad[0] = [0.0, 0.0, 0.004, 0.0, 1.3, 0.0]
    m = model.with_hydro(replace(h, link_quadratic_drag=quad))
    omega = 0.8
    state = SystemState(Pose(), Twist(), [0.0, 0.0, 2.8, 0.0], [omega, 0, 0, 0])
    w = link_wrenches(m, state)[0].vector()
    cx = model.hydro.link_centers[0][0]
    # centre velocity from omega about z, then quadratic drag at the centre
    # (sway drag only, so the x component of the centre velocity drops out)
    vy = omega * cx
    fy = -1.3 * vy * abs(vy)
    tz = -0.004 * omega * abs(omega)
    expected_joint_torque = tz + cx * fy
    assert math.isclose(w[2], expected_joint_torque, rel_tol=1e-12)
    assert expected_joint_torque < 0  # opposes the spin
    assert all(np.all(x.vector() == 0) for x in link_wrenches(m, state)[1:])


def test_zeroed_hydro_gives_zero_wrenches(model, rng):
    m = model.without_hydrodynamics()
    state = SystemState(Pose.from_rpy(0.2, 0.1, 0), Twist(rng.standard_normal(3), rng.standard_normal(3)), model.home, rng.standard_normal(4))
    assert all(np.all(w.vector() == 0) for w in link_wrenches(m, state))
    assert np.all(vehicle_wrench(m, state).vector() == 0)


def test_no_linear_drag_on_links(model):
    # doubling the speed of a link quadruples its pure-drag wrench (quadratic only)
    h = model.hydro.zeroed()
    m = model.with_hydro(replace(h, link_quadratic_drag=model.hydro.link_quadratic_drag))
    s1 = SystemState(Pose(), Twist(), model.home, [0.3, 0.2, 0.1, 0.4])
    s2 = SystemState(Pose(), Twist(), model.home, [0.6, 0.4, 0.2, 0.8])
    for a, b in zip(link_wrenches(m, s1), link_wrenches(m, s2)):
        assert np.allclose(4 * a.vector(), b.vector(), rtol=1e-10, atol=1e-15)


def test_cylinder_added_mass_values():
    A = cylinder_added_mass(0.02, 0.2, 1000.0)
    assert math.isclose(A[4, 4], 1000 * math.pi * 0.02**2 * 0.2, rel_tol=1e-12)
    assert math.isclose(A[4, 4], 0.2513, abs_tol=1e-4)
    assert A[3, 3] == 0 and A[0, 0] == 0
    assert math.isclose(A[1, 1], A[4, 4] * 0.2**2 / 12, rel_tol=1e-12)
    assert np.all(cylinder_added_mass(0.0, 0.2) == 0)


def test_cylinder_added_mass_scaling():
    a, b = cylinder_added_mass(0.03, 0.1), cylinder_added_mass(0.03, 0.2)
    assert math.isclose(b[4, 4], 2 * a[4, 4], rel_tol=1e-12)
    assert math.isclose(b[1, 1], 8 * a[1, 1], rel_tol=1e-12)


@pytest.mark.parametrize("group", PERTURBATION_GROUPS)
def test_perturb_deterministic_and_zero_level(model, group):
    h = model.hydro
    a = perturb(h, PerturbationSpec(group, 0.1, 7))
    b = perturb(h, PerturbationSpec(group, 0.1, 7))
    assert a.to_dict() == b.to_dict()
    assert perturb(h, PerturbationSpec(group, 0.0, 7)).to_dict() == h.to_dict()
    assert a.to_dict() != h.to_dict()


FIELDS = {
    "vehicle-linear-drag": "vehicle_linear_drag",
    "vehicle-quadratic-drag": "vehicle_quadratic_drag",
    "manipulator-drag": "link_quadratic_drag",
    "vehicle-added-mass": "vehicle_added_mass",
    "manipulator-added-mass": "link_added_mass",
}


@pytest.mark.parametrize("group", PERTURBATION_GROUPS)
def test_perturb_bounds_pattern_and_isolation(model, group):
    h = model.hydro
    name = FIELDS[group]
    nominal = getattr(h, name)
    for seed in range(1000):
        p = perturb(h, PerturbationSpec(group, 0.5, seed))
        new = getattr(p, name)
        nz = nominal != 0
        ratio = new[nz] / nominal[nz]
        assert np.all(ratio >= 0.5 - 1e-12) and np.all(ratio <= 1.5 + 1e-12)
        assert np.all(new[~nz] == 0)
        if seed % 100 == 0:
            for other in set(FIELDS.values()) - {name}:
                assert np.array_equal(getattr(p, other), getattr(h, other))
            if group.endswith("added-mass"):
                assert np.array_equal(new, np.swapaxes(new, -1, -2))


def test_perturbation_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec("thrusters", 0.1)
    with pytest.raises(ValueError):
        PerturbationSpec("vehicle-added-mass", 1.5)


def test_perturb_full_added_mass_stays_positive_definite(model, rng):
    A = rng.standard_normal((6, 6))
    MA = A @ A.T + 0.1 * np.eye(6)
    h = replace(model.hydro, vehicle_added_mass=MA)
    for seed in range(50):
        p = perturb(h, PerturbationSpec("vehicle-added-mass", 0.5, seed))
        assert np.linalg.eigvalsh(p.vehicle_added_mass).min() > 0
