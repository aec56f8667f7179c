"""GRU networks in plain numpy: forward, BPTT, Adam, training and forecasting.

Shapes are batch-first, ``(B, T, features)``. Gate blocks inside every
weight matrix are ordered update, reset, candidate.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import channels as ch
from .dataset import Dataset, NormStats, pitch_targets

log = logging.getLogger(__name__)

CONTEXT = 25


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``net`` holds the last finite checkpoint."""

    def __init__(self, msg, net=None, curve=None):
        super().__init__(msg)
        self.net = net
        self.curve = curve


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# GRU layer
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GruLayer:
    W: np.ndarray  # (inputs, 3H)
    U: np.ndarray  # (H, 3H)
    b: np.ndarray  # (3H,)

    def __post_init__(self):
        I, H3 = self.W.shape
        if H3 % 3 or self.U.shape != (H3 // 3, H3) or self.b.shape != (H3,):
            raise ValueError("inconsistent GRU weight shapes")

    @property
    def input_size(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.U.shape[0]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng) -> GruLayer:
        H = hidden_size
        W = glorot(rng, input_size, 3 * H)
        U = np.hstack([orthogonal(rng, H) for _ in range(3)])
        return cls(W, U, np.zeros(3 * H))

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> GruLayer:
        return cls(np.zeros((input_size, 3 * hidden_size)), np.zeros((hidden_size, 3 * hidden_size)), np.zeros(3 * hidden_size))


def gru_cell(layer: GruLayer, xp, h):
    """One step from the projected input ``xp = x W + b``; returns (h_new, cache)."""
    H = layer.hidden_size
    a = xp[:, : 2 * H] + h @ layer.U[:, : 2 * H]
    zr = sigmoid(a)
    z, r = zr[:, :H], zr[:, H:]
    rh = r * h
    n = np.tanh(xp[:, 2 * H :] + rh @ layer.U[:, 2 * H :])
    h_new = h + z * (n - h)
    return h_new, (h, z, r, n, rh)


def gru_cell_backward(layer: GruLayer, cache, dh, dU):
    """Backward through one cell. Accumulates into ``dU``; returns (dxp, dh_prev)."""
    H = layer.hidden_size
    h, z, r, n, rh = cache
    dn = dh * z
    dz = dh * (n - h)
    dh_prev = dh * (1.0 - z)
    dan = dn * (1.0 - n * n)
    dU[:, 2 * H :] += rh.T @ dan
    drh = dan @ layer.U[:, 2 * H :].T
    dh_prev += drh * r
    dr = drh * h
    dzr = np.hstack([dz * z * (1.0 - z), dr * r * (1.0 - r)])
    dU[:, : 2 * H] += h.T @ dzr
    dh_prev += dzr @ layer.U[:, : 2 * H].T
    return np.hstack([dzr, dan]), dh_prev


def gru_forward(layer: GruLayer, X, h0=None):
    """Hidden sequence ``(B, T, H)`` for inputs ``(B, T, I)``, plus the BPTT cache."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.shape[2] != layer.input_size:
        raise ValueError(f"input width {X.shape[2]} does not match layer input size {layer.input_size}")
    B, T, _ = X.shape
    h = np.zeros((B, layer.hidden_size)) if h0 is None else np.array(h0, dtype=float).reshape(B, -1)
    XP = X @ layer.W + layer.b
    Hs = np.empty((B, T, layer.hidden_size))
    caches = []
    for t in range(T):
        h, c = gru_cell(layer, XP[:, t], h)
        Hs[:, t] = h
        caches.append(c)
    return Hs, {"X": X, "caches": caches}


def gru_backward(layer: GruLayer, cache, dHs):
    """Exact BPTT. Returns ({"W", "U", "b", "h0"} gradients, dX)."""
    if cache is None or "caches" not in cache:
        raise ValueError("a forward cache from the same sequence is required")
    X = cache["X"]
    B, T, _ = X.shape
    dU = np.zeros_like(layer.U)
    dXP = np.empty((B, T, 3 * layer.hidden_size))
    dh = np.zeros((B, layer.hidden_size))
    for t in range(T - 1, -1, -1):
        dXP[:, t], dh = gru_cell_backward(layer, cache["caches"][t], dh + dHs[:, t], dU)
    flatX = X.reshape(B * T, -1)
    flatD = dXP.reshape(B * T, -1)
    grads = {"W": flatX.T @ flatD, "U": dU, "b": flatD.sum(0), "h0": dh}
    return grads, dXP @ layer.W.T


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def update(self, params: dict, grads: dict, lr: float) -> None:
        """Bias-corrected Adam step, in place on ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            p = params[k]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_update(params: dict, grads: dict, state: Adam, lr: float) -> dict:
    state.update(params, grads, lr)
    return params


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------


def pad(arrays, fill=0.0):
    n = max(len(a) for a in arrays)
    out = np.full((len(arrays), n) + arrays[0].shape[1:], fill, dtype=np.result_type(arrays[0], type(fill)))
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return out


def masked_mse(pred, target, mask):
    """Mean over valid entries of each trajectory, then over trajectories; and d/dpred."""
    m = mask.astype(float)
    count = m.reshape(len(m), -1).sum(1)
    count = np.maximum(count, 1.0)
    err = (pred - target) * m
    per = (err * err).reshape(len(m), -1).sum(1) / count
    w = (1.0 / (count * len(m))).reshape((-1,) + (1,) * (pred.ndim - 1))
    return float(per.mean()), 2.0 * err * w


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Net:
    """Parameters live in ``self.params``; the GRU layer is a view onto them."""

    arch = ""

    @property
    def gru(self) -> GruLayer:
        p = self.params
        return GruLayer(p["gru.W"], p["gru.U"], p["gru.b"])

    @property
    def units(self) -> int:
        return self.params["gru.U"].shape[0]

    def copy(self):
        return copy.deepcopy(self)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def check_inputs(self, names) -> None:
        if tuple(names) != tuple(self.channels):
            raise ValueError(f"channel mismatch: net expects {list(self.channels)}, data has {list(names)}")

    # -- checkpoints ---------------------------------------------------------
    def descriptor(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> Path:
        path = Path(path)
        desc = self.descriptor()
        desc["stats"] = self.stats.to_dict() if self.stats is not None else None
        with open(path, "wb") as fh:
            np.savez(fh, descriptor=np.array(json.dumps(desc, sort_keys=True)), **self.params)
        return path


def load_net(path) -> Net:
    with np.load(path, allow_pickle=False) as z:
        desc = json.loads(str(z["descriptor"]))
        params = {k: z[k].copy() for k in z.files if k != "descriptor"}
    stats = NormStats.from_dict(desc["stats"]) if desc.get("stats") else None
    if desc["arch"] == "pitch":
        net = PitchOnlyNet(desc["channels"], params["fc.W"].shape[1], desc["units"], desc["stride"], rate=desc["rate"])
    elif desc["arch"] == "auto":
        net = AutoregressiveNet(desc["channels"], desc["units"], desc["waypoint_channels"], rate=desc["rate"])
    else:
        raise ValueError(f"unknown architecture {desc['arch']!r}")
    for k, v in params.items():
        if net.params[k].shape != v.shape:
            raise ValueError(f"checkpoint tensor {k} has shape {v.shape}, expected {net.params[k].shape}")
    net.params = params
    net.stats = stats
    net.meta = desc.get("meta", {})
    return net


class PitchOnlyNet(Net):
    """GRU + linear head giving, at every step, k future pitches spaced ``stride`` apart."""

    arch = "pitch"

    def __init__(self, channels, k: int = 25, units: int = 384, stride: int = 1, seed: int = 0, rate: float = 50.0):
        if k < 1 or stride < 1:
            raise ValueError("k and stride must be at least 1")
        self.channels = tuple(channels)
        if ch.PITCH not in self.channels:
            raise ValueError("inputs must include vehicle pitch")
        self.k, self.stride, self.rate = int(k), int(stride), float(rate)
        rng = np.random.default_rng(seed)
        gru = GruLayer.init(len(self.channels), units, rng)
        self.params = {
            "gru.W": gru.W,
            "gru.U": gru.U,
            "gru.b": gru.b,
            "fc.W": glorot(rng, units, self.k),
            "fc.b": np.zeros(self.k),
        }
        self.stats = None
        self.meta = {}

    @property
    def horizon(self) -> float:
        return self.k * self.stride / self.rate

    def descriptor(self):
        return {
            "arch": self.arch,
            "channels": list(self.channels),
            "units": self.units,
            "k": self.k,
            "stride": self.stride,
            "rate": self.rate,
            "meta": self.meta,
        }

    def forward(self, X):
        Hs, cache = gru_forward(self.gru, X)
        return Hs @ self.params["fc.W"] + self.params["fc.b"], (Hs, cache)

    def loss_and_grad(self, X, Y, M):
        pred, (Hs, cache) = self.forward(X)
        loss, dY = masked_mse(pred, Y, M)
        B, T, _ = Hs.shape
        g = {
            "fc.W": Hs.reshape(B * T, -1).T @ dY.reshape(B * T, -1),
            "fc.b": dY.reshape(B * T, -1).sum(0),
        }
        gg, _ = gru_backward(self.gru, cache, dY @ self.params["fc.W"].T)
        g["gru.W"], g["gru.U"], g["gru.b"] = gg["W"], gg["U"], gg["b"]
        return loss, g

    def loss(self, X, Y, M):
        return masked_mse(self.forward(X)[0], Y, M)[0]

    def batch(self, seqs):
        """Padded (inputs, targets, mask) for normalized sequences."""
        j = self.channels.index(ch.PITCH)
        ys, ms = zip(*(pitch_targets(s[:, j], self.k, self.stride) for s in seqs))
        return pad(seqs), pad(list(ys)), pad(list(ms), False)


def pitch_only_forward(net: PitchOnlyNet, X):
    return net.forward(X)[0]


class AutoregressiveNet(Net):
    """Residual full-state predictor: ``next = x + FC([h, waypoints])``."""

    arch = "auto"

    def __init__(self, channels, units: int = 384, waypoint_channels=(), seed: int = 0, rate: float = 10.0):
        self.channels = tuple(channels)
        self.waypoint_channels = tuple(waypoint_channels)
        if any(c in ch.CONSTANT for c in self.channels):
            raise ValueError("waypoint constants belong in waypoint_channels, not the state")
        if ch.PITCH not in self.channels:
            raise ValueError("state must include vehicle pitch")
        self.rate = float(rate)
        D, Wn = len(self.channels), len(self.waypoint_channels)
        rng = np.random.default_rng(seed)
        gru = GruLayer.init(D, units, rng)
        self.params = {
            "gru.W": gru.W,
            "gru.U": gru.U,
            "gru.b": gru.b,
            "fc.W": glorot(rng, units + Wn, D),
            "fc.b": np.zeros(D),
        }
        self.stats = None
        self.meta = {}

    @property
    def width(self) -> int:
        return len(self.channels)

    def descriptor(self):
        return {
            "arch": self.arch,
            "channels": list(self.channels),
            "waypoint_channels": list(self.waypoint_channels),
            "units": self.units,
            "rate": self.rate,
            "meta": self.meta,
        }

    def _head(self, h, wp):
        p = self.params
        H = h.shape[1]
        out = h @ p["fc.W"][:H] + p["fc.b"]
        if wp is not None and wp.shape[1]:
            out += wp @ p["fc.W"][H:]
        return out

    def step(self, x, h, wp=None):
        """Next state and hidden state; ``h`` is carried across calls."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.width:
            raise ValueError(f"state width {x.shape[1]} does not match net width {self.width}")
        if self.waypoint_channels:
            wp = np.atleast_2d(np.asarray(wp, dtype=float))
            if wp.shape[1] != len(self.waypoint_channels):
                raise ValueError("waypoint width mismatch")
        else:
            wp = None
        if h is None:
            h = np.zeros((len(x), self.units))
        gru = self.gru
        h, _ = gru_cell(gru, x @ gru.W + gru.b, h)
        return x + self._head(h, wp), h

    def run(self, X, wp=None, feedback=None):
        """Unroll over ``X (B, T, D)``.

        Where ``feedback[b, t]`` is true the input at ``t`` is the previous
        prediction instead of ``X[b, t]``. Returns predictions of ``x[t+1]``
        and the cache for :meth:`backward`.
        """
        B, T, D = X.shape
        gru = self.gru
        h = np.zeros((B, self.units))
        P = np.empty((B, T, D))
        Xin = np.empty((B, T, D))
        Hs = np.empty((B, T, self.units))
        caches = []
        for t in range(T):
            x = X[:, t]
            if feedback is not None and t > 0:
                x = np.where(feedback[:, t, None], P[:, t - 1], x)
            Xin[:, t] = x
            h, c = gru_cell(gru, x @ gru.W + gru.b, h)
            caches.append(c)
            Hs[:, t] = h
            P[:, t] = x + self._head(h, wp)
        return P, {"Xin": Xin, "Hs": Hs, "caches": caches, "wp": wp, "feedback": feedback}

    def backward(self, cache, dP):
        gru = self.gru
        Xin, Hs, wp, fb = cache["Xin"], cache["Hs"], cache["wp"], cache["feedback"]
        B, T, D = Xin.shape
        H = self.units
        Wf = self.params["fc.W"]
        dU = np.zeros_like(gru.U)
        dXP = np.empty((B, T, 3 * H))
        dPt = np.zeros((B, T, D))
        dh = np.zeros((B, H))
        carry = np.zeros((B, D))
        for t in range(T - 1, -1, -1):
            d = dP[:, t] + carry
            dPt[:, t] = d
            dh = dh + d @ Wf[:H].T
            dxp, dh = gru_cell_backward(gru, cache["caches"][t], dh, dU)
            dXP[:, t] = dxp
            dx = d + dxp @ gru.W.T
            if fb is not None and t > 0:
                carry = dx * fb[:, t, None]
            else:
                carry = np.zeros((B, D))
        flatD = dPt.reshape(B * T, D)
        dWf = np.empty_like(Wf)
        dWf[:H] = Hs.reshape(B * T, H).T @ flatD
        if wp is not None and wp.shape[1]:
            dWf[H:] = wp.T @ dPt.sum(1)
        g = {"fc.W": dWf, "fc.b": flatD.sum(0)}
        g["gru.W"] = Xin.reshape(B * T, D).T @ dXP.reshape(B * T, -1)
        g["gru.U"] = dU
        g["gru.b"] = dXP.reshape(B * T, -1).sum(0)
        return g

    def loss_and_grad(self, X, Y, M, wp=None, feedback=None):
        P, cache = self.run(X, wp, feedback)
        loss, dP = masked_mse(P, Y, M)
        return loss, self.backward(cache, dP)

    def loss(self, X, Y, M, wp=None, feedback=None):
        return masked_mse(self.run(X, wp, feedback)[0], Y, M)[0]

    def split_state(self, ds: Dataset):
        """(state sequences, waypoint vectors) of a dataset in net channel order."""
        si = [ds.index(c) for c in self.channels]
        wi = [ds.index(c) for c in self.waypoint_channels]
        return [s[:, si] for s in ds.sequences], [s[0, wi] for s in ds.sequences]

    def teacher_batch(self, seqs, wps):
        X = pad(seqs)
        Y = np.zeros_like(X)
        Y[:, :-1] = X[:, 1:]
        M = np.zeros(X.shape, dtype=bool)
        for i, s in enumerate(seqs):
            M[i, : len(s) - 1] = True
        wp = np.array(wps) if self.waypoint_channels else None
        return X, Y, M, wp


def autoregressive_step(net: AutoregressiveNet, x, h=None, wp=None):
    return net.step(x, h, wp)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    decay: float = 0.9
    decay_every: int = 5
    batch_size: int = 16
    validations_per_epoch: int = 5
    seed: int = 0
    grad_clip: float | None = None
    # autoregressive only
    pretrain_epochs: int = 50
    context: int = CONTEXT

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0 or self.validations_per_epoch < 1:
            raise ValueError("invalid training schedule")

    def lr_at(self, epoch: int) -> float:
        """Learning rate during zero-based ``epoch``."""
        return self.lr * self.decay ** (epoch // self.decay_every)

    def to_dict(self):
        return asdict(self)


def _clip(grads, limit):
    if limit is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > limit:
        return {k: g * (limit / norm) for k, g in grads.items()}
    return grads


def _checkpoints(n_batches: int, per_epoch: int) -> set[int]:
    return {max(1, int(np.ceil(n_batches * (i + 1) / per_epoch))) for i in range(per_epoch)}


def _attach(net, train: Dataset):
    net.stats = train.stats.take(net.channels + getattr(net, "waypoint_channels", ())) if train.stats else None


def train_pitch_only(net: PitchOnlyNet, train: Dataset, val: Dataset, config: TrainConfig):
    """Mini-batch BPTT over whole trajectories; returns the best-validation net and the curve."""
    net.check_inputs(train.channels)
    net.check_inputs(val.channels)
    _attach(net, train)
    rng = np.random.default_rng([config.seed, 1])
    Xv, Yv, Mv = net.batch(val.sequences)
    opt = Adam()
    best, best_loss = net.copy(), net.loss(Xv, Yv, Mv)
    curve = [{"epoch": 0, "batch": 0, "train_loss": None, "val_loss": best_loss, "lr": config.lr}]
    n = len(train)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        batches = [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
        checks = _checkpoints(len(batches), config.validations_per_epoch)
        for bi, idx in enumerate(batches, 1):
            X, Y, M = net.batch([train.sequences[i] for i in idx])
            loss, g = net.loss_and_grad(X, Y, M)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch + 1}", best, curve)
            opt.update(net.params, _clip(g, config.grad_clip), lr)
            if bi in checks:
                vl = net.loss(Xv, Yv, Mv)
                curve.append({"epoch": epoch + 1, "batch": bi, "train_loss": loss, "val_loss": vl, "lr": lr})
                if not np.isfinite(vl):
                    raise TrainingDiverged(f"non-finite validation loss in epoch {epoch + 1}", best, curve)
                if vl < best_loss:
                    best, best_loss = net.copy(), vl
        log.debug("epoch %d val %.5f", epoch + 1, curve[-1]["val_loss"])
    best.meta = dict(best.meta, best_val_loss=best_loss, train_config=config.to_dict())
    return best, curve


def _forecast_batch(net: AutoregressiveNet, seqs, wps, k: int, context: int, rng):
    """Teacher-forced prefix up to a random start, then ``k`` fed-back steps."""
    starts = []
    for s in seqs:
        hi = len(s) - 1 - k
        lo = min(context - 1, hi)
        t0 = int(rng.integers(max(lo, 0), hi + 1)) if hi >= 0 else None
        starts.append(t0)
    cut = [s[: t0 + k + 1] if t0 is not None else s for s, t0 in zip(seqs, starts)]
    X, Y, M, wp = net.teacher_batch(cut, wps)
    fb = np.zeros(X.shape[:2], dtype=bool)
    for i, t0 in enumerate(starts):
        if t0 is not None and k > 0:
            fb[i, t0 + 1 : t0 + k] = True
    return X, Y, M, wp, fb


def train_autoregressive(net: AutoregressiveNet, train: Dataset, val: Dataset, config: TrainConfig, k: int):
    """Teacher-forced pretraining, then forecasting practice with fed-back predictions.

    Phase two draws one forecast start per trajectory; the loss covers the
    teacher-forced prefix and the ``k`` forecast steps. Validation uses the
    same criterion with a fixed draw of start points.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    _attach(net, train)
    rng = np.random.default_rng([config.seed, 2])
    tr_s, tr_w = net.split_state(train)
    va_s, va_w = net.split_state(val)
    opt = Adam()
    curve = []
    total = config.pretrain_epochs + config.epochs
    val_rng_seed = [config.seed, 3]

    def val_loss(phase2):
        if phase2 and k > 0:
            X, Y, M, wp, fb = _forecast_batch(net, va_s, va_w, k, config.context, np.random.default_rng(val_rng_seed))
            return net.loss(X, Y, M, wp, fb)
        X, Y, M, wp = net.teacher_batch(va_s, va_w)
        return net.loss(X, Y, M, wp)

    best, best_loss = net.copy(), np.inf
    for epoch in range(total):
        phase2 = epoch >= config.pretrain_epochs
        if epoch == config.pretrain_epochs:
            # the selection criterion changes with the phase
            best_loss = np.inf
        lr = config.lr_at(epoch)
        order = rng.permutation(len(tr_s))
        batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        checks = _checkpoints(len(batches), config.validations_per_epoch)
        for bi, idx in enumerate(batches, 1):
            seqs = [tr_s[i] for i in idx]
            wps = [tr_w[i] for i in idx]
            if phase2 and k > 0:
                X, Y, M, wp, fb = _forecast_batch(net, seqs, wps, k, config.context, rng)
            else:
                (X, Y, M, wp), fb = net.teacher_batch(seqs, wps), None
            loss, g = net.loss_and_grad(X, Y, M, wp, fb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch + 1}", best, curve)
            opt.update(net.params, _clip(g, config.grad_clip), lr)
            if bi in checks:
                vl = val_loss(phase2)
                curve.append({"epoch": epoch + 1, "batch": bi, "phase": 2 if phase2 else 1, "train_loss": loss, "val_loss": vl, "lr": lr})
                if not np.isfinite(vl):
                    raise TrainingDiverged(f"non-finite validation loss in epoch {epoch + 1}", best, curve)
                if vl < best_loss:
                    best, best_loss = net.copy(), vl
    if not np.isfinite(best_loss):
        best = net.copy()
    best.meta = dict(best.meta, best_val_loss=float(best_loss), train_config=config.to_dict(), k=k)
    return best, curve


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _pitch_scale(net, ds: Dataset) -> float:
    stats = ds.stats if ds.stats is not None else net.stats
    if stats is None:
        return 1.0
    return stats.of(ch.PITCH)[1]


def pitch_only_errors(net: PitchOnlyNet, ds: Dataset, horizon_steps: int | None = None, context: int = CONTEXT):
    """Squared errors (rad^2) of the net and of persistence over full forecast windows.

    Windows start once ``context`` samples have been seen and must lie
    inside the episode; ``horizon_steps`` truncates to the first outputs.
    """
    net.check_inputs(ds.channels)
    k = net.k if horizon_steps is None else int(horizon_steps)
    if not 1 <= k <= net.k:
        raise ValueError(f"horizon of {k} outputs exceeds the trained {net.k}")
    scale = _pitch_scale(net, ds)
    j = ds.index(ch.PITCH)
    se_net, se_per = [], []
    X, _, _ = net.batch(ds.sequences)
    pred = net.forward(X)[0]
    for i, s in enumerate(ds.sequences):
        y, m = pitch_targets(s[:, j], k, net.stride)
        rows = np.arange(len(s))
        ok = (rows >= context - 1) & m.all(1)
        if not ok.any():
            continue
        p = pred[i, : len(s), :k][ok]
        truth = y[ok]
        se_net.append(((p - truth) * scale) ** 2)
        se_per.append(((s[ok, j][:, None] - truth) * scale) ** 2)
    if not se_net:
        raise ValueError("no episode is long enough for the requested horizon")
    return np.concatenate(se_net), np.concatenate(se_per)


def forecast_windows(net: AutoregressiveNet, seq, wp, k: int, context: int = CONTEXT, starts=None):
    """Every k-step forecast of one normalized sequence.

    Returns (starts, predictions (n, k, D)); prediction ``[i, j]`` is the
    forecast of ``seq[starts[i] + j + 1]`` after ground truth up to
    ``starts[i]``.
    """
    T, D = seq.shape
    if starts is None:
        starts = np.arange(context - 1, T - k)
    starts = np.asarray(starts, dtype=int)
    if len(starts) == 0:
        return starts, np.empty((0, k, D))
    wpb = None
    if net.waypoint_channels:
        wp1 = np.asarray(wp, dtype=float)[None]
        P, cache = net.run(seq[None], wp1)
        wpb = np.repeat(wp1, len(starts), 0)
    else:
        P, cache = net.run(seq[None])
    h = cache["Hs"][0, starts]
    x = P[0, starts]
    out = np.empty((len(starts), k, D))
    for step in range(k):
        out[:, step] = x
        if step + 1 < k:
            x, h = net.step(x, h, wpb)
    return starts, out


def autoregressive_errors(net: AutoregressiveNet, ds: Dataset, k: int, context: int = CONTEXT):
    """Squared pitch errors (rad^2) of the net and of persistence over k-step forecasts."""
    if k < 1:
        raise ValueError("forecast length must be at least one step")
    seqs, wps = net.split_state(ds)
    j = net.channels.index(ch.PITCH)
    scale = _pitch_scale(net, ds)
    se_net, se_per = [], []
    for s, wp in zip(seqs, wps):
        starts, F = forecast_windows(net, s, wp, k, context)
        if not len(starts):
            continue
        idx = starts[:, None] + np.arange(1, k + 1)[None]
        truth = s[idx, j]
        se_net.append(((F[:, :, j] - truth) * scale) ** 2)
        se_per.append(((s[starts, j][:, None] - truth) * scale) ** 2)
    if not se_net:
        raise ValueError(f"no episode is long enough for {context} context steps plus a {k}-step forecast")
    return np.concatenate(se_net), np.concatenate(se_per)


def rmse(se) -> float:
    return float(np.sqrt(np.mean(se)))


def forecast_rmse(net: Net, ds: Dataset, horizon: float, context: int = CONTEXT) -> float:
    """RMSE in radians of forecast pitch over ``horizon`` seconds."""
    return evaluate(net, ds, horizon, context)["rmse_rad"]


def evaluate(net: Net, ds: Dataset, horizon: float | None = None, context: int = CONTEXT) -> dict:
    """Net and persistence RMSE (radians) over the forecast window."""
    if isinstance(net, PitchOnlyNet):
        if horizon is None:
            steps = net.k
        else:
            steps = int(round(horizon * ds.rate / net.stride))
            if steps < 1 or steps > net.k or abs(steps * net.stride / ds.rate - horizon) > 1e-9:
                raise ValueError(f"horizon {horizon} s is not reachable with k={net.k}, stride={net.stride} at {ds.rate:g} Hz")
        se, sp = pitch_only_errors(net, ds, steps, context)
        h = steps * net.stride / ds.rate
    else:
        if horizon is None:
            raise ValueError("an autoregressive evaluation needs a horizon")
        steps = int(round(horizon * ds.rate))
        if steps < 1 or abs(steps / ds.rate - horizon) > 1e-9:
            raise ValueError(f"horizon {horizon} s is not a whole number of steps at {ds.rate:g} Hz")
        se, sp = autoregressive_errors(net, ds, steps, context)
        h = steps / ds.rate
    return {
        "horizon_s": h,
        "rmse_rad": rmse(se),
        "persistence_rmse_rad": rmse(sp),
        "windows": int(len(se)),
        "normalized_rmse": rmse(se) / _pitch_scale(net, ds),
    }
