import csv

import numpy as np
import pytest

from uvms_pitch import channels as ch
from uvms_pitch.dataset import Dataset
from uvms_pitch.experiments import (
    CSV_COLUMNS,
    PRESETS,
    ExperimentReport,
    ablation_report,
    degradation,
    emit_report,
    episode_seed_base,
    get_preset,
    parse_report,
    read_csv_rows,
    run_ablation,
    run_horizon_study,
    stage_seed,
)
from uvms_pitch.hydrodynamics import PERTURBATION_GROUPS, PerturbationSpec, perturb_model


def all_channel_dataset(n=3, T=20, rate=50.0):
    rng = np.random.default_rng(0)
    return Dataset([rng.standard_normal((T, 40)) for _ in range(n)], ch.ALL, rate, list(range(n)))


# usefulness of each group in the toy problem; group 1 is pure noise
WEIGHTS = {1: 0.0, 2: 3.0, 3: 9.0, 4: 6.0, 5: 8.0, 6: 1.0, 7: 5.0, 8: 2.0, 9: 0.5}


def toy_train_fn(seen):
    def fn(tr, va, seed):
        assert ch.PITCH in tr.channels and ch.PITCH_RATE in tr.channels
        assert tr.channels == va.channels
        kept = tr.meta["groups"]
        seen.append(seed)
        return 100.0 - sum(WEIGHTS[g] for g in kept)

    return fn


def test_toy_ablation_eliminates_noise_first():
    ds = all_channel_dataset()
    seen = []
    state = run_ablation(ds, ds, get_preset("desk"), seed=1, train_fn=toy_train_fn(seen))
    assert state.history[0]["removed"] == 1
    assert len(state.history) == 8
    assert state.order == sorted(WEIGHTS, key=WEIGHTS.get)
    assert state.remaining == [3]
    # 9 + 8 + ... + 2 candidate trainings, one repetition each
    assert len(seen) == sum(range(2, 10)) and len(set(seen)) == len(seen)


def test_ablation_report_rows():
    ds = all_channel_dataset()
    state = run_ablation(ds, ds, get_preset("desk"), train_fn=toy_train_fn([]))
    rep = ablation_report(state, pitch_std=0.5)
    assert len(rep.rows) == sum(range(2, 10))
    assert rep.meta["order"] == state.order
    row = rep.rows[0]
    assert row["rmse_rad"] == pytest.approx(np.sqrt(row["normalized_rmse"] ** 2) * 0.5)


def test_ablation_missing_group_channels_rejected():
    ds = all_channel_dataset()
    small = Dataset([s[:, :5] for s in ds.sequences], ch.ALL[:5], 50.0, ds.seeds)
    with pytest.raises(KeyError):
        run_ablation(small, small, get_preset("desk"), groups=[1, 5], train_fn=toy_train_fn([]))


def test_perfect_predictor_horizon_study_is_all_zero():
    preset = get_preset("desk")
    pitch = all_channel_dataset(rate=50.0)
    auto = all_channel_dataset(rate=10.0)
    trained = []

    def perfect(net, ds, h):
        return {"rmse_rad": 0.0, "persistence_rmse_rad": 1.0, "normalized_rmse": 0.0}

    rep = run_horizon_study(
        {"pitch": (pitch, pitch), "auto": (auto, auto)},
        preset,
        seed=3,
        strides=(1, 2, 4, 8),
        train_pitch_fn=lambda tr, va, s, stride: trained.append(("pitch", stride)),
        train_auto_fn=lambda tr, va, s, k: trained.append(("auto", k)),
        eval_fn=perfect,
    )
    assert all(r["rmse_rad"] == 0.0 for r in rep.rows)
    hs = [r["horizon_s"] for r in rep.rows if r["arch"] == "pitch"]
    assert hs == [0.5, 1.0, 2.0, 4.0]
    assert [r["horizon_s"] for r in rep.rows if r["arch"] == "auto"] == list(preset.auto_horizons)
    # desk preset shares one autoregressive net across horizons
    assert trained.count(("auto", 10)) == 1 and len(trained) == 5


def test_report_round_trip(tmp_path):
    rep = ExperimentReport("horizon", "forecast horizon (s)", meta={"preset": "desk"})
    rep.add("pitch-only@0.5s", 0, 11, 0.0123456789012345, horizon_s=0.5)
    rep.add("pitch-only@0.5s", 1, 12, 0.02, horizon_s=0.5)
    rep.add("pitch-only@1s", 0, 13, 0.03, horizon_s=1.0)
    csv_path, json_path = emit_report(rep, tmp_path)
    assert parse_report(tmp_path, "horizon") == rep
    rows = read_csv_rows(csv_path)
    assert [r["rmse_rad"] for r in rows] == [r["rmse_rad"] for r in rep.rows]
    with open(csv_path) as fh:
        assert next(csv.reader(fh)) == list(CSV_COLUMNS)
    assert rep.summary() == {"pitch-only@0.5s": pytest.approx(0.01617284445), "pitch-only@1s": 0.03}


def test_empty_report_writes_header_only(tmp_path):
    csv_path, _ = emit_report(ExperimentReport("ablation", "group removed"), tmp_path)
    assert csv_path.read_text().strip().splitlines() == [",".join(CSV_COLUMNS)]
    with pytest.raises(ValueError):
        emit_report(ExperimentReport("ablation", "x"), tmp_path, fmt="xlsx")


def test_degradation_against_nominal():
    rep = ExperimentReport("perturbation", "x")
    rep.add("nominal", 0, 0, 0.02)
    rep.add("vehicle-linear-drag@0.5", 0, 1, 0.03, group="vehicle-linear-drag", level=0.5)
    rep.add("vehicle-linear-drag@0.5", 1, 2, 0.02, group="vehicle-linear-drag", level=0.5)
    assert degradation(rep) == {("vehicle-linear-drag", 0.5): pytest.approx(0.25)}


@pytest.mark.parametrize("group", PERTURBATION_GROUPS)
def test_zero_level_perturbation_is_a_no_op(model, group):
    assert perturb_model(model, PerturbationSpec(group, 0.0, 9)).fingerprint == model.fingerprint


def test_stage_seed():
    a = stage_seed(0, "horizon", "pitch", 1, 0)
    assert a == stage_seed(0, "horizon", "pitch", 1, 0)
    assert a != stage_seed(1, "horizon", "pitch", 1, 0) and a != stage_seed(0, "horizon", "pitch", 2, 0)
    assert all(0 <= stage_seed(r, "x") < 2**31 for r in range(100))


def test_train_and_test_seed_ranges_are_disjoint():
    assert episode_seed_base(0) == 0 and episode_seed_base(0, test=True) == 500_000
    assert episode_seed_base(1) == 1_000_000


def test_presets():
    assert set(PRESETS) == {"paper", "desk"}
    p = get_preset("paper")
    assert (p.n_episodes, p.units, p.epochs, p.lr, p.k, p.rate) == (5000, 384, 100, 1e-3, 25, 50.0)
    assert p.train_config(0).lr_at(10) == pytest.approx(1e-3 * 0.81)
    assert get_preset("desk").fingerprint(0) != get_preset("desk").fingerprint(1)
    with pytest.raises(KeyError):
        get_preset("huge")
