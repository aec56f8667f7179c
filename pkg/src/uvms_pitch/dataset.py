"""Raw episodes to network-ready sequences.

Fixed order: velocity smoothing at the simulation rate, orientation as
roll/pitch/yaw, downsampling, then z-scoring with training-split statistics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import channels as ch
from .simulation import Episode

WINDOW = 15
PIPELINE_ORDER = ("smooth_velocities", "quaternion_to_rpy", "downsample", "normalize")


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-episode transforms
# ---------------------------------------------------------------------------


def moving_average(x, window: int = WINDOW) -> np.ndarray:
    """Centred moving average along axis 0; edges use shrinking symmetric windows."""
    x = np.asarray(x, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd number")
    T = x.shape[0]
    if T < window:
        raise ValueError(f"series of length {T} is shorter than the {window}-point window")
    half = window // 2
    idx = np.arange(T)
    h = np.minimum(half, np.minimum(idx, T - 1 - idx))
    cs = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    s = cs[idx + h + 1] - cs[idx - h]
    w = (2 * h + 1).reshape((-1,) + (1,) * (x.ndim - 1))
    return s / w


def _with_step(ep: Episode, step: str, **kw) -> Episode:
    meta = dict(ep.meta)
    meta["pipeline"] = list(meta.get("pipeline", [])) + [step]
    return ep.replace(meta=meta, **kw)


def smooth_velocities(ep: Episode, window: int = WINDOW) -> Episode:
    """Moving average on every velocity channel, desired velocities included."""
    cols = [ch.CONTINUOUS.index(c) for c in ch.VELOCITY_CHANNELS]
    series = ep.series.copy()
    series[:, cols] = moving_average(series[:, cols], window)
    return _with_step(ep, f"smooth_velocities(window={window})@{ep.rate:g}Hz", series=series)


def downsample(ep: Episode, rate: float) -> Episode:
    """Keep every (source/target)-th sample starting with the first."""
    ratio = ep.rate / rate if rate > 0 else 0.0
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9:
        raise PipelineError(f"cannot downsample {ep.rate:g} Hz to {rate:g} Hz")
    aux = {k: v[::r] for k, v in ep.aux.items() if np.ndim(v) and len(v) == len(ep)}
    return _with_step(ep, f"downsample@{rate:g}Hz", series=ep.series[::r], rate=float(rate), aux=aux)


def preprocess(ep: Episode, rate: float, window: int = WINDOW) -> Episode:
    """Smooth at the recording rate, then downsample.

    Roll/pitch/yaw are formed from the quaternion while recording; the
    orientation channels are untouched by smoothing, so that step commutes
    with it and is logged here in its nominal place.
    """
    ep = smooth_velocities(ep, window)
    ep = _with_step(ep, "quaternion_to_rpy")
    return downsample(ep, rate)


def is_smoothed(ep: Episode) -> bool:
    return any(s.startswith("smooth_velocities") for s in ep.meta.get("pipeline", []))


def at_rate(ep: Episode, rate: float, window: int = WINDOW) -> Episode:
    """Bring a raw or already smoothed episode to ``rate``."""
    if not is_smoothed(ep):
        return preprocess(ep, rate, window)
    return ep if ep.rate == rate else downsample(ep, rate)


def preprocessor(rate: float, window: int = WINDOW):
    """Picklable per-episode transform for :func:`generate_dataset`."""
    return partial(preprocess, rate=rate, window=window)


def check_pipeline_order(steps) -> None:
    """Raise if the logged steps are out of the fixed order."""
    pos = []
    for name in PIPELINE_ORDER:
        hits = [i for i, s in enumerate(steps) if s.startswith(name)]
        if hits:
            pos.append((hits[0], name))
    if pos != sorted(pos):
        raise PipelineError(f"pipeline steps out of order: {list(steps)}")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    """Per-episode (time x channel) arrays sharing one channel list."""

    sequences: list[np.ndarray]
    channels: tuple[str, ...]
    rate: float
    seeds: list[int]
    meta: dict = field(default_factory=dict)
    stats: NormStats | None = None

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if len(self.sequences) != len(self.seeds):
            raise ValueError("one seed per sequence expected")
        for s in self.sequences:
            if s.ndim != 2 or s.shape[1] != len(self.channels):
                raise ValueError("sequence width does not match the channel list")

    def __len__(self):
        return len(self.sequences)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def normalized(self) -> bool:
        return self.stats is not None

    def index(self, name: str) -> int:
        return self.channels.index(name)

    def column(self, name: str) -> list[np.ndarray]:
        j = self.index(name)
        return [s[:, j] for s in self.sequences]

    def subset(self, idx) -> Dataset:
        idx = list(idx)
        return Dataset([self.sequences[i] for i in idx], self.channels, self.rate, [self.seeds[i] for i in idx], dict(self.meta), self.stats)

    def with_sequences(self, seqs, channels=None, stats="keep") -> Dataset:
        return Dataset(
            list(seqs),
            self.channels if channels is None else channels,
            self.rate,
            list(self.seeds),
            dict(self.meta),
            self.stats if stats == "keep" else stats,
        )

    @classmethod
    def from_episodes(cls, episodes: list[Episode]) -> Dataset:
        """All 40 channels; waypoint constants are repeated along time."""
        if not episodes:
            raise PipelineError("no episodes")
        rates = {e.rate for e in episodes}
        if len(rates) != 1:
            raise PipelineError(f"mixed sample rates {sorted(rates)}")
        seqs = [np.hstack([e.series, np.broadcast_to(e.constants, (len(e), len(e.constants)))]) for e in episodes]
        steps = list(episodes[0].meta.get("pipeline", []))
        check_pipeline_order(steps)
        meta = {"pipeline": steps, "model_fingerprint": episodes[0].model_fingerprint}
        return cls(seqs, ch.ALL, rates.pop(), [e.seed for e in episodes], meta)

    # -- files ---------------------------------------------------------------
    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for seed, s in zip(self.seeds, self.sequences):
            name = f"sequence_{seed:06d}.npy"
            np.save(out / name, s)
            files.append({"seed": seed, "file": name, "samples": len(s)})
        meta = dict(self.meta, channels=list(self.channels), rate_hz=self.rate, sequences=files, window=WINDOW)
        (out / "pipeline.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        if self.stats is not None:
            self.stats.save(out / "stats.json")
        return out

    @classmethod
    def load(cls, in_dir) -> Dataset:
        d = Path(in_dir)
        meta = json.loads((d / "pipeline.json").read_text())
        seqs = [np.load(d / f["file"]) for f in meta["sequences"]]
        seeds = [f["seed"] for f in meta["sequences"]]
        stats = NormStats.load(d / "stats.json") if (d / "stats.json").exists() else None
        chans = meta.pop("channels")
        rate = meta.pop("rate_hz")
        meta.pop("sequences")
        return cls(seqs, chans, rate, seeds, meta, stats)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class NormStats:
    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)

    def of(self, name: str) -> tuple[float, float]:
        j = self.channels.index(name)
        return float(self.mean[j]), float(self.std[j])

    def take(self, names) -> NormStats:
        idx = [self.channels.index(c) for c in names]
        return NormStats(tuple(names), self.mean[idx], self.std[idx])

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> NormStats:
        return cls(d["channels"], d["mean"], d["std"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> NormStats:
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_stats(ds: Dataset) -> NormStats:
    """Continuous channels over every time step; waypoint constants over episodes.

    A waypoint channel that never varies (the start state is always home at
    rest) gets std 1 so it normalizes to zero; a constant continuous channel
    is an error.
    """
    allv = np.concatenate(ds.sequences)
    first = np.array([s[0] for s in ds.sequences])
    mean = np.empty(ds.n_channels)
    std = np.empty(ds.n_channels)
    for j, c in enumerate(ds.channels):
        if c in ch.CONSTANT:
            mean[j] = first[:, j].mean()
            sd = first[:, j].std()
            std[j] = sd if sd > 1e-12 * max(1.0, abs(mean[j])) else 1.0
        else:
            mean[j] = allv[:, j].mean()
            sd = allv[:, j].std()
            if not sd > 1e-12 * max(1.0, abs(mean[j])):
                raise PipelineError(f"channel {c!r} has zero variance in the training split")
            std[j] = sd
    return NormStats(ds.channels, mean, std)


def normalize(ds: Dataset, stats: NormStats | None = None) -> tuple[Dataset, NormStats]:
    """Z-score every channel; without ``stats`` they come from ``ds`` (training split)."""
    if ds.normalized:
        raise PipelineError("dataset is already normalized")
    if stats is None:
        stats = compute_stats(ds)
    st = stats.take(ds.channels)
    seqs = [(s - st.mean) / st.std for s in ds.sequences]
    out = ds.with_sequences(seqs, stats=st)
    out.meta["pipeline"] = list(ds.meta.get("pipeline", [])) + ["normalize"]
    check_pipeline_order(out.meta["pipeline"])
    return out, st


def denormalize(x, stats: NormStats, channels=None) -> np.ndarray:
    st = stats if channels is None else stats.take(channels)
    return np.asarray(x) * st.std + st.mean


def denormalize_dataset(ds: Dataset) -> Dataset:
    if not ds.normalized:
        return ds
    out = ds.with_sequences([denormalize(s, ds.stats) for s in ds.sequences], stats=None)
    out.meta["pipeline"] = [s for s in out.meta.get("pipeline", []) if s != "normalize"]
    return out


# ---------------------------------------------------------------------------
# selection and splits
# ---------------------------------------------------------------------------


def selected_channels(groups) -> tuple[str, ...]:
    groups = set(groups)
    if not groups:
        raise ValueError("at least one feature group is required")
    bad = groups - set(ch.FEATURE_GROUPS)
    if bad:
        raise KeyError(f"unknown feature group(s) {sorted(bad)}")
    keep = set(ch.ALWAYS_KEEP)
    for g in groups:
        keep.update(ch.FEATURE_GROUPS[g].channels)
    return tuple(c for c in ch.ALL if c in keep)


def select_features(ds: Dataset, groups) -> Dataset:
    """Channels of ``groups`` plus pitch and pitch rate, in canonical order."""
    names = selected_channels(groups)
    missing = [c for c in names if c not in ds.channels]
    if missing:
        raise KeyError(f"dataset lacks channels {missing}")
    idx = [ds.index(c) for c in names]
    out = ds.with_sequences([s[:, idx] for s in ds.sequences], channels=names)
    if ds.stats is not None:
        out.stats = ds.stats.take(names)
    out.meta["groups"] = sorted(set(groups))
    return out


def take_channels(ds: Dataset, names) -> Dataset:
    """Exactly ``names``, in that order."""
    names = tuple(names)
    missing = [c for c in names if c not in ds.channels]
    if missing:
        raise KeyError(f"dataset lacks channels {missing}")
    idx = [ds.index(c) for c in names]
    out = ds.with_sequences([s[:, idx] for s in ds.sequences], channels=names)
    if ds.stats is not None:
        out.stats = ds.stats.take(names)
    return out


def split(ds: Dataset, train_fraction: float = 0.95, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Episode-level seeded shuffle split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must lie strictly between 0 and 1")
    n = len(ds)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} episodes at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(sorted(perm[:n_train])), ds.subset(sorted(perm[n_train:]))


# ---------------------------------------------------------------------------
# training targets
# ---------------------------------------------------------------------------


def pitch_targets(pitch, k: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """(T x k) future pitch ``pitch[t + j*stride]``, j = 1..k, plus validity mask."""
    if k < 1 or stride < 1:
        raise ValueError("k and stride must be at least 1")
    pitch = np.asarray(pitch, dtype=float)
    T = len(pitch)
    idx = np.arange(T)[:, None] + stride * np.arange(1, k + 1)[None, :]
    mask = idx < T
    return np.where(mask, pitch[np.minimum(idx, T - 1)], 0.0), mask


@dataclass(eq=False)
class SequenceSample:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    seed: int
    rate: float


def pitch_samples(ds: Dataset, k: int, stride: int = 1) -> list[SequenceSample]:
    j = ds.index(ch.PITCH)
    out = []
    for s, seed in zip(ds.sequences, ds.seeds):
        y, m = pitch_targets(s[:, j], k, stride)
        out.append(SequenceSample(s, y, m, seed, ds.rate))
    return out


def autoregressive_samples(ds: Dataset) -> list[SequenceSample]:
    """Inputs x[t], targets x[t+1]; the last step has no target."""
    out = []
    for s, seed in zip(ds.sequences, ds.seeds):
        y = np.vstack([s[1:], np.zeros((1, s.shape[1]))])
        m = np.ones(s.shape, dtype=bool)
        m[-1] = False
        out.append(SequenceSample(s, y, m, seed, ds.rate))
    return out


def prepare(
    episodes: list[Episode] | Dataset,
    groups=None,
    train_fraction: float = 0.95,
    seed: int = 0,
) -> tuple[Dataset, Dataset, NormStats]:
    """Select groups, split and normalize with training statistics."""
    ds = episodes if isinstance(episodes, Dataset) else Dataset.from_episodes(episodes)
    if groups is not None:
        ds = select_features(ds, groups)
    train, val = split(ds, train_fraction, seed)
    train, stats = normalize(train)
    val, _ = normalize(val, stats)
    train.meta["split_seed"] = val.meta["split_seed"] = seed
    return train, val, stats
