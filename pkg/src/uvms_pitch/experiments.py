"""Scripted studies: feature ablation, forecast horizon and hydrodynamic robustness.

Every study takes a root seed; per-stage seeds are derived from it with
:func:`stage_seed` so each report cell can be regenerated on its own.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import channels as ch
from . import nn
from .dataset import Dataset, at_rate, normalize, prepare, select_features, take_channels
from .hydrodynamics import PERTURBATION_GROUPS, PerturbationError, PerturbationSpec, perturb_model
from .model import VehicleArmModel
from .simulation import DatasetRejectionError, UnstableModelError, find_passive_equilibrium, generate_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment", "condition", "repetition", "seed", "rmse_rad")
TEST_SEED_OFFSET = 500_000
SEEDS_PER_ROOT = 1_000_000


def stage_seed(root: int, *stage) -> int:
    """Deterministic 31-bit seed for a named stage under ``root``."""
    key = ":".join(str(s) for s in (root,) + stage).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little") & 0x7FFFFFFF


def episode_seed_base(root: int, test: bool = False) -> int:
    return root * SEEDS_PER_ROOT + (TEST_SEED_OFFSET if test else 0)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    n_episodes: int
    units: int
    epochs: int
    lr: float
    decay: float = 0.9
    decay_every: int = 5
    k: int = 25
    rate: float = 50.0
    groups: tuple = ch.TOP_FIVE
    train_fraction: float = 0.95
    settle_time: float = 2.0
    # horizon study
    strides: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    horizon_repetitions: int = 3
    auto_rate: float = 10.0
    auto_units: int = 384
    auto_pretrain_epochs: int = 50
    auto_epochs: int = 50
    auto_horizons: tuple = (0.5, 1.0, 2.0, 3.0, 4.0)
    auto_per_horizon: bool = True
    auto_train_horizon: float = 1.0
    auto_waypoints: bool = False
    # ablation
    ablation_episodes: int = 5000
    ablation_units: int = 128
    ablation_epochs: int = 50
    ablation_lr: float = 1e-3
    ablation_decay: float = 0.8
    ablation_decay_every: int = 1
    ablation_repetitions: int = 3
    # perturbation study
    perturb_levels: tuple = (0.01, 0.1, 0.5)
    perturb_models: int = 10
    perturb_episodes: int = 50

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(epochs=self.epochs, lr=self.lr, decay=self.decay, decay_every=self.decay_every, seed=seed)

    def auto_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(
            epochs=self.auto_epochs,
            pretrain_epochs=self.auto_pretrain_epochs,
            lr=self.lr,
            decay=self.decay,
            decay_every=self.decay_every,
            seed=seed,
        )

    def ablation_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(
            epochs=self.ablation_epochs,
            lr=self.ablation_lr,
            decay=self.ablation_decay,
            decay_every=self.ablation_decay_every,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, seed: int) -> str:
        blob = json.dumps({"preset": self.to_dict(), "seed": seed}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS = {
    "paper": Preset("paper", n_episodes=5000, units=384, epochs=100, lr=1e-3),
    # desk scale: a larger learning rate makes up for the short schedule
    "desk": Preset(
        "desk",
        n_episodes=200,
        units=64,
        epochs=30,
        lr=5e-3,
        horizon_repetitions=1,
        auto_units=64,
        auto_pretrain_epochs=30,
        auto_epochs=30,
        auto_per_horizon=False,
        ablation_episodes=200,
        ablation_units=32,
        ablation_epochs=10,
        ablation_lr=5e-3,
        ablation_repetitions=1,
        perturb_models=3,
        perturb_episodes=10,
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class MultiRate:
    """Episode transform returning ``{rate: processed episode}``."""

    def __init__(self, rates):
        self.rates = tuple(rates)

    def __call__(self, ep):
        return {r: at_rate(ep, r) for r in self.rates}


def simulate_at_rates(
    model: VehicleArmModel, n: int, base_seed: int, rates, settle_time: float = 2.0, threads: int = 1
) -> dict[float, list]:
    g = generate_dataset(model, n, base_seed, settle_time=settle_time, transform=MultiRate(rates), threads=threads)
    return {r: [e[r] for e in g.episodes] for r in rates}


def training_data(episodes, preset: Preset, seed: int, groups=None) -> tuple[Dataset, Dataset]:
    train, val, _ = prepare(episodes, preset.groups if groups is None else groups, preset.train_fraction, stage_seed(seed, "split"))
    return train, val


def data_for_net(net: nn.Net, episodes) -> Dataset:
    """Test episodes in the net's channels, normalized with its stored statistics."""
    ds = Dataset.from_episodes([at_rate(e, net.rate) for e in episodes])
    ds = take_channels(ds, tuple(net.channels) + tuple(getattr(net, "waypoint_channels", ())))
    ds, _ = normalize(ds, net.stats)
    return ds


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ExperimentReport:
    kind: str
    axis: str
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, condition, repetition: int, seed: int, rmse_rad: float, **extra) -> None:
        self.rows.append(
            dict(experiment=self.kind, condition=str(condition), repetition=int(repetition), seed=int(seed), rmse_rad=float(rmse_rad), **extra)
        )

    def conditions(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["condition"] not in seen:
                seen.append(r["condition"])
        return seen

    def values(self, condition: str, key: str = "rmse_rad") -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["condition"] == condition])

    def mean(self, condition: str, key: str = "rmse_rad") -> float:
        v = self.values(condition, key)
        if not len(v):
            raise KeyError(condition)
        return float(v.mean())

    def summary(self) -> dict[str, float]:
        return {c: self.mean(c) for c in self.conditions()}

    def __eq__(self, other):
        return isinstance(other, ExperimentReport) and (self.kind, self.axis, self.rows, self.meta) == (
            other.kind,
            other.axis,
            other.rows,
            other.meta,
        )


def emit_report(report: ExperimentReport, out_dir, fmt: str = "csv") -> list[Path]:
    """CSV (one row per condition x repetition) plus plot-ready JSON."""
    if fmt != "csv":
        raise ValueError(f"unsupported report format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{report.kind}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([r["experiment"], r["condition"], r["repetition"], r["seed"], repr(r["rmse_rad"])])
    conds = report.conditions()
    plot = {
        "kind": report.kind,
        "x_label": report.axis,
        "y_label": "RMSE (rad)",
        "conditions": conds,
        "mean_rmse_rad": [report.mean(c) for c in conds],
        "std_rmse_rad": [float(report.values(c).std()) for c in conds],
        "rows": report.rows,
        "meta": report.meta,
    }
    json_path = out / f"{report.kind}_plot.json"
    json_path.write_text(json.dumps(plot, indent=2))
    return [csv_path, json_path]


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["repetition"] = int(r["repetition"])
        r["seed"] = int(r["seed"])
        r["rmse_rad"] = float(r["rmse_rad"])
    return rows


def parse_report(out_dir, kind: str) -> ExperimentReport:
    d = json.loads((Path(out_dir) / f"{kind}_plot.json").read_text())
    return ExperimentReport(d["kind"], d["x_label"], d["rows"], d["meta"])


# ---------------------------------------------------------------------------
# training helpers
# ---------------------------------------------------------------------------


def _retrying(train_fn, seed: int, attempts: int = 3):
    for i in range(attempts):
        try:
            return train_fn(seed + i)
        except nn.TrainingDiverged as exc:
            log.warning("training diverged (seed %d): %s; retrying with seed %d", seed + i, exc, seed + i + 1)
    raise nn.TrainingDiverged(f"training diverged {attempts} times from seed {seed}")


def train_pitch(preset: Preset, train: Dataset, val: Dataset, seed: int, stride: int = 1, units=None, config=None):
    def go(s):
        net = nn.PitchOnlyNet(train.channels, preset.k, units or preset.units, stride, seed=s, rate=train.rate)
        cfg = config or preset.train_config(s)
        return nn.train_pitch_only(net, train, val, replace(cfg, seed=s))[0]

    return _retrying(go, seed)


def train_auto(preset: Preset, train: Dataset, val: Dataset, k: int, seed: int):
    state = tuple(c for c in train.channels if c not in ch.CONSTANT)
    wps = tuple(c for c in train.channels if c in ch.CONSTANT) if preset.auto_waypoints else ()

    def go(s):
        net = nn.AutoregressiveNet(state, preset.auto_units, wps, seed=s, rate=train.rate)
        return nn.train_autoregressive(net, train, val, preset.auto_config(s), k)[0]

    return _retrying(go, seed)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AblationState:
    remaining: list[int]
    history: list[dict] = field(default_factory=list)

    @property
    def order(self) -> list[int]:
        """Groups from least to most useful, the survivor last."""
        return [h["removed"] for h in self.history] + list(self.remaining)

    def to_dict(self) -> dict:
        return {"remaining": list(self.remaining), "history": self.history, "order": self.order}


def run_ablation(
    train: Dataset,
    val: Dataset,
    preset: Preset,
    seed: int = 0,
    groups=None,
    train_fn: Callable[[Dataset, Dataset, int], float] | None = None,
    tie_tol: float = 1e-6,
) -> AblationState:
    """Backwards elimination over feature groups.

    ``train``/``val`` hold every channel of the groups considered (already
    normalized). Each step trains one net per candidate group left out,
    ``preset.ablation_repetitions`` times, and drops the group whose removal
    gives the lowest mean validation loss. Pitch and pitch rate stay in.
    """
    groups = sorted(set(groups or ch.FEATURE_GROUPS))
    for g in groups:
        missing = set(ch.FEATURE_GROUPS[g].channels) - set(train.channels)
        if missing:
            raise KeyError(f"group {g} channels missing from dataset: {sorted(missing)}")
    if train_fn is None:

        def train_fn(tr, va, s):
            net = train_pitch(preset, tr, va, s, units=preset.ablation_units, config=preset.ablation_config(s))
            return net.meta["best_val_loss"]

    state = AblationState(list(groups))
    step = 0
    while len(state.remaining) > 1:
        step += 1
        losses = {}
        for g in state.remaining:
            keep = [x for x in state.remaining if x != g]
            tr, va = select_features(train, keep), select_features(val, keep)
            reps = [train_fn(tr, va, stage_seed(seed, "ablation", step, g, r)) for r in range(preset.ablation_repetitions)]
            losses[g] = float(np.mean(reps))
        best = min(losses.values())
        tied = [g for g in state.remaining if losses[g] <= best + tie_tol]
        removed = max(tied, key=lambda g: (len(ch.FEATURE_GROUPS[g].channels), -g))
        state.remaining.remove(removed)
        state.history.append({"step": step, "removed": removed, "losses": {str(g): v for g, v in losses.items()}, "remaining": list(state.remaining)})
        log.info("ablation step %d: removed group %d", step, removed)
    return state


def ablation_report(state: AblationState, pitch_std: float, seed: int = 0) -> ExperimentReport:
    rep = ExperimentReport("ablation", "group removed")
    for h in state.history:
        for g, loss in h["losses"].items():
            rep.add(f"step{h['step']}-without-{g}", 0, seed, float(np.sqrt(loss)) * pitch_std, normalized_rmse=float(np.sqrt(loss)))
    rep.meta = {"order": state.order, "group_names": {g: ch.FEATURE_GROUPS[g].name for g in ch.FEATURE_GROUPS}}
    return rep


# ---------------------------------------------------------------------------
# horizon study
# ---------------------------------------------------------------------------


def run_horizon_study(
    data: dict,
    preset: Preset,
    seed: int = 0,
    strides=None,
    auto_horizons=None,
    train_pitch_fn=None,
    train_auto_fn=None,
    eval_fn=None,
) -> ExperimentReport:
    """Pitch-only nets per stride and an autoregressive net per forecast length.

    ``data`` maps ``"pitch"`` and ``"auto"`` to (train, validation) pairs at
    the two sample rates; either may be absent to skip that half.
    """
    strides = preset.strides if strides is None else strides
    auto_horizons = preset.auto_horizons if auto_horizons is None else auto_horizons
    train_pitch_fn = train_pitch_fn or (lambda tr, va, s, stride: train_pitch(preset, tr, va, s, stride))
    train_auto_fn = train_auto_fn or (lambda tr, va, s, k: train_auto(preset, tr, va, k, s))
    eval_fn = eval_fn or (lambda net, ds, h: nn.evaluate(net, ds, h))
    rep = ExperimentReport("horizon", "forecast horizon (s)", meta={"preset": preset.name, "fingerprint": preset.fingerprint(seed)})
    if "pitch" in data:
        tr, va = data["pitch"]
        for stride in strides:
            h = preset.k * stride / tr.rate
            for r in range(preset.horizon_repetitions):
                s = stage_seed(seed, "horizon", "pitch", stride, r)
                net = train_pitch_fn(tr, va, s, stride)
                res = eval_fn(net, va, h)
                rep.add(f"pitch-only@{h:g}s", r, s, res["rmse_rad"], horizon_s=h, arch="pitch", **_extras(res))
    if "auto" in data:
        tr, va = data["auto"]
        shared = None
        for h in auto_horizons:
            for r in range(preset.horizon_repetitions):
                if preset.auto_per_horizon:
                    s = stage_seed(seed, "horizon", "auto", h, r)
                    net = train_auto_fn(tr, va, s, int(round(h * tr.rate)))
                else:
                    s = stage_seed(seed, "horizon", "auto", r)
                    if shared is None or len(shared) <= r:
                        shared = (shared or []) + [train_auto_fn(tr, va, s, int(round(preset.auto_train_horizon * tr.rate)))]
                    net = shared[r]
                res = eval_fn(net, va, h)
                rep.add(f"autoregressive@{h:g}s", r, s, res["rmse_rad"], horizon_s=h, arch="auto", **_extras(res))
    return rep


def _extras(res: dict) -> dict:
    return {k: res[k] for k in ("persistence_rmse_rad", "normalized_rmse") if k in res}


# ---------------------------------------------------------------------------
# perturbation study
# ---------------------------------------------------------------------------


def _test_rmse(net, model: VehicleArmModel, preset: Preset, base_seed: int, n: int, threads: int) -> dict:
    g = generate_dataset(model, n, base_seed, settle_time=preset.settle_time, transform=MultiRate([net.rate]), threads=threads)
    eps = [e[net.rate] for e in g.episodes]
    return nn.evaluate(net, data_for_net(net, eps))


def run_perturbation_study(
    model: VehicleArmModel,
    net: nn.Net,
    preset: Preset,
    seed: int = 0,
    groups=PERTURBATION_GROUPS,
    levels=None,
    threads: int = 1,
    max_resample: int = 10,
) -> ExperimentReport:
    """RMSE of a nominally trained net on episodes from perturbed models.

    Every model in a cell replays the same trajectory seeds as the nominal
    test set, so differences come from the hydrodynamics alone.
    """
    levels = preset.perturb_levels if levels is None else levels
    base = episode_seed_base(seed, test=True)
    n = preset.perturb_episodes
    rep = ExperimentReport("perturbation", "parameter group @ error level", meta={"preset": preset.name, "fingerprint": preset.fingerprint(seed)})
    nominal = _test_rmse(net, model, preset, base, n, threads)
    rep.add("nominal", 0, base, nominal["rmse_rad"], model_fingerprint=model.fingerprint, **_extras(nominal))
    for gi, group in enumerate(groups):
        for li, level in enumerate(levels):
            for i in range(preset.perturb_models):
                s = stage_seed(seed, "perturb", group, level, i)
                for attempt in range(max_resample):
                    try:
                        pm = perturb_model(model, PerturbationSpec(group, level, s))
                        find_passive_equilibrium(pm)
                        res = _test_rmse(net, pm, preset, base, n, threads)
                        break
                    except (UnstableModelError, PerturbationError, DatasetRejectionError) as exc:
                        log.warning("perturbed model %s@%g seed %d rejected (%s); resampling", group, level, s, exc)
                        s += 1
                else:
                    raise UnstableModelError(f"no usable perturbed model for {group}@{level} after {max_resample} draws")
                rep.add(f"{group}@{level:g}", i, s, res["rmse_rad"], group=group, level=level, model_fingerprint=pm.fingerprint, **_extras(res))
    return rep


def degradation(report: ExperimentReport) -> dict[tuple[str, float], float]:
    """Mean relative RMSE change per (group, level) against the nominal row."""
    nominal = report.mean("nominal")
    out = {}
    for r in report.rows:
        if r["condition"] == "nominal":
            continue
        key = (r["group"], r["level"])
        out.setdefault(key, []).append(r["rmse_rad"] / nominal - 1.0)
    return {k: float(np.mean(v)) for k, v in out.items()}
