import copy

import numpy as np
import pytest
from conftest import default_raw

from uvms_pitch import channels as ch
from uvms_pitch.control import QuinticSegment, WaypointPair, eval_quintic, minimum_duration, plan_random_trajectory
from uvms_pitch.model import model_from_dict
from uvms_pitch.simulation import (
    DatasetRejectionError,
    Episode,
    EpisodeConfig,
    UnstableModelError,
    find_passive_equilibrium,
    generate_dataset,
    read_episodes,
    run_episode,
)
from uvms_pitch.spatial import quat_to_matrix


def segment_to(model, goal, scale=1.0):
    eq = find_passive_equilibrium(model)
    z = np.zeros(4)
    q0 = np.array(eq.q)
    goal = np.asarray(goal, float)
    T = minimum_duration(q0, z, goal, z, model.velocity_limits, model.acceleration_limits, model.control.min_duration)
    wp = WaypointPair(q0, z, goal, z)
    return QuinticSegment.from_waypoints(wp, T * scale, scale), wp


def vertical_model():
    """Arm hanging straight below the vehicle origin; everything on the z axis."""
    raw = copy.deepcopy(default_raw())
    raw["vehicle"]["center_of_buoyancy"] = {"value": [0.0, 0.0, 0.06]}
    L = raw["links"]
    for link in L:
        link["center_of_mass"] = [0.0, 0, 0] if link is L[0] else [link["length"] / 2, 0, 0]
        link["center"] = link["center_of_mass"]
    L[0]["joint"]["origin"] = [0.0, 0.0, -0.1]
    L[1]["joint"]["origin"] = [0.0, 0.0, 0.0]
    L[1]["joint"]["limits"] = [-0.4, 1.6]
    L[2]["joint"]["limits"] = [-0.5, 3.0]
    L[2]["joint"]["origin"] = [0.15, 0, 0]
    L[3]["joint"]["origin"] = [0.14, 0, 0]
    raw["home"] = [0.0, np.pi / 2, 0.0, 0.0]
    return model_from_dict(raw).validate()


def test_episode_layout(model):
    ep = run_episode(model, EpisodeConfig(seed=3))
    assert ep.series.shape[1] == 24 == len(ch.CONTINUOUS)
    assert ep.constants.shape == (16,) == (len(ch.CONSTANT),)
    assert ep.rate == 1000.0 and ep.is_finite()
    # both end points are recorded
    expected = int(round((ep.duration + 2.0) * 1000)) + 1
    assert len(ep) == expected
    h = ep.header()
    assert h["channels"] == list(ch.CONTINUOUS) and h["model_fingerprint"] == model.fingerprint


def test_same_seed_bit_identical(model):
    a = run_episode(model, EpisodeConfig(seed=11))
    b = run_episode(model, EpisodeConfig(seed=11))
    assert a.series.tobytes() == b.series.tobytes()
    assert a.constants.tobytes() == b.constants.tobytes()
    c = run_episode(model, EpisodeConfig(seed=12))
    assert c.series.shape != a.series.shape or not np.array_equal(c.series, a.series)


def test_zero_length_trajectory_holds_equilibrium(model):
    eq = find_passive_equilibrium(model)
    seg, wp = segment_to(model, eq.q)
    ep = run_episode(model, EpisodeConfig(seed=0, settle_time=3.0), seg, wp)
    pitch = ep.pitch
    assert np.max(np.abs(pitch - ep.meta["equilibrium_pitch"])) < 1e-4


def test_arm_extension_pitches_then_settles(model):
    seg, wp = segment_to(model, [0.0, 0.0, 0.2, 0.0], scale=1.5)
    ep = run_episode(model, EpisodeConfig(seed=0, settle_time=6.0), seg, wp)
    pitch = ep.pitch
    eq = ep.meta["equilibrium_pitch"]
    t = ep.time
    moving = t <= seg.duration
    # clear excursion while the arm moves
    assert np.max(np.abs(pitch[moving] - eq)) > 0.05
    # after the motion pitch levels off at a new value
    tail = pitch[t > t[-1] - 1.0]
    assert np.ptp(tail) < 0.1 * np.max(np.abs(pitch - eq))
    assert abs(tail.mean() - eq) > 0.05
    # station keeping holds the vehicle
    assert ep.meta["max_station_error_m"] < model.control.station_radius


def test_desired_velocity_channel_is_the_reference(model):
    ep = run_episode(model, EpisodeConfig(seed=5))
    seg, _ = plan_random_trajectory(model, 5, start_q=find_passive_equilibrium(model).q)
    des = ep.series[:, [ch.CONTINUOUS.index(f"joint{j}_desired_velocity") for j in range(1, 5)]]
    for k in range(0, len(ep), 97):
        t = k / ep.rate
        ref = eval_quintic(seg, t)[1] if t <= seg.duration else np.zeros(4)
        assert np.max(np.abs(des[k] - ref)) < 1e-12


def test_recorded_rpy_matches_quaternion(model):
    ep = run_episode(model, EpisodeConfig(seed=8))
    qs = ep.aux["quaternion"]
    for k in (0, len(ep) // 2, len(ep) - 1):
        R = quat_to_matrix(qs[k])
        # pitch from the rotation matrix directly
        assert abs(np.arcsin(-R[2, 0]) - ep.pitch[k]) < 1e-12


def test_episode_save_load_round_trip(model, tmp_path):
    ep = run_episode(model, EpisodeConfig(seed=2))
    back = Episode.load(ep.save(tmp_path / "ep.npz"))
    assert np.array_equal(back.series, ep.series) and np.array_equal(back.constants, ep.constants)
    assert back.seed == ep.seed and back.rate == ep.rate and back.model_fingerprint == ep.model_fingerprint


def test_generate_dataset_single_equals_run_episode(model, tmp_path):
    g = generate_dataset(model, 1, 21, out_dir=tmp_path)
    ep = run_episode(model, EpisodeConfig(seed=21))
    assert np.array_equal(g.episodes[0].series, ep.series)
    eps = read_episodes(tmp_path)
    assert [e.seed for e in eps] == [21]
    with pytest.raises(ValueError):
        generate_dataset(model, 0, 0)


def test_generate_dataset_parallel_matches_serial(model):
    a = generate_dataset(model, 3, 40, threads=1)
    b = generate_dataset(model, 3, 40, threads=2)
    assert a.seeds == b.seeds == [40, 41, 42]
    assert all(np.array_equal(x.series, y.series) for x, y in zip(a.episodes, b.episodes))


def test_rejection_limit(model, monkeypatch):
    from uvms_pitch import simulation

    def failing(args):
        return args[1].seed, None, "non-finite state"

    monkeypatch.setattr(simulation, "_episode_job", failing)
    with pytest.raises(DatasetRejectionError):
        generate_dataset(model, 3, 0)


def test_equilibrium_symmetric_model_is_level():
    m = vertical_model()
    eq = find_passive_equilibrium(m)
    r, p, _ = eq.pose.rpy()
    assert abs(p) < 1e-6 and abs(r) < 1e-6


def test_equilibrium_home_pitches_nose_down(model):
    eq = find_passive_equilibrium(model)
    nose = quat_to_matrix(np.array(eq.pose.orientation)) @ [1, 0, 0]
    assert nose[2] < 0
    assert 0 < eq.pose.rpy()[1] < 0.2
    assert np.max(np.abs(eq.twist.vector())) < 1e-5


def test_equilibrium_unstable_model_flagged(raw_config):
    raw = copy.deepcopy(raw_config)
    raw["vehicle"]["center_of_buoyancy"] = {"value": [0.0, 0.0, -0.2]}
    with pytest.raises(UnstableModelError):
        find_passive_equilibrium(model_from_dict(raw))


def test_station_keeping_radius_over_sample(sample_episodes, model):
    within = np.mean([e.meta["station_within_radius"] for e in sample_episodes])
    assert within >= 0.99
    assert max(e.meta["max_station_error_m"] for e in sample_episodes) < model.control.station_radius


def test_coupling_present_in_most_episodes(sample_episodes):
    frac = np.mean([e.meta["max_pitch_excursion"] > 0.01 for e in sample_episodes])
    assert frac >= 0.9
