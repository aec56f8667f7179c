"""Command line entry point: ``uvms-pitch <command> [options]``.

Settings come from the model file, then ``UVMS_<OPTION>`` environment
variables, then flags; later sources win.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path


from . import channels as ch
from . import experiments as X
from . import nn
from .dataset import Dataset, PipelineError, at_rate, prepare
from .model import ConfigError, load_model
from .simulation import DatasetRejectionError, EpisodeAborted, UnstableModelError, generate_dataset, read_episodes, write_episodes

log = logging.getLogger("uvms_pitch")

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_SIMULATION = 4
EXIT_DIVERGED = 5

ENV_PREFIX = "UVMS_"


def _env(name, default=None, cast=str):
    v = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    return default if v is None else cast(v)


def file_hash(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        if f.name == "run_manifest.json":
            continue
        if p.is_dir():
            h.update(f.relative_to(p).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(out, command: str, config: dict, seeds: dict, inputs: dict, outputs: dict, started: float, extra=None) -> Path:
    out = Path(out)
    target = out if out.is_dir() else out.parent
    target.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "fingerprints": {k: file_hash(v) for k, v in {**inputs, **outputs}.items() if v is not None and Path(v).exists()},
        "wall_clock_s": round(time.time() - started, 3),
        "result": extra or {},
    }
    name = "run_manifest.json" if out.is_dir() else f"{out.stem}.manifest.json"
    path = target / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _threads(args):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=args.threads)


def _groups(text: str):
    if text in ("all", "*"):
        return sorted(ch.FEATURE_GROUPS)
    if text == "top5":
        return list(ch.TOP_FIVE)
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _model(args):
    model = load_model(args.model)
    if getattr(args, "payload", 0.0):
        model = model.with_payload(args.payload)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    t0 = time.time()
    model = _model(args)
    transform = None if args.rate == 1000 else X.MultiRate([args.rate])
    g = generate_dataset(model, args.n, args.seed, settle_time=args.settle, transform=transform, threads=args.threads)
    episodes = g.episodes if transform is None else [e[args.rate] for e in g.episodes]
    out = Path(args.out)
    write_episodes(out, episodes, g.rejected)
    write_manifest(
        out,
        "simulate",
        {"model": model.to_dict(), "n": args.n, "rate_hz": args.rate, "settle_s": args.settle},
        {"base_seed": args.seed},
        {"model": args.model},
        {"episodes": out},
        t0,
        {"n_ok": len(episodes), "rejected": g.rejected, "model_fingerprint": model.fingerprint},
    )
    print(f"simulated {len(episodes)} episodes ({len(g.rejected)} rejected) -> {out}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    t0 = time.time()
    episodes = [at_rate(e, args.rate) for e in read_episodes(args.inp)]
    groups = _groups(args.groups)
    train, val, stats = prepare(episodes, groups, args.split, args.seed)
    out = Path(args.out)
    train.save(out / "train")
    val.save(out / "val")
    stats.save(out / "stats.json")
    write_manifest(
        out,
        "dataset",
        {"rate_hz": args.rate, "groups": groups, "split": args.split, "channels": list(train.channels)},
        {"split_seed": args.seed},
        {"episodes": args.inp},
        {"dataset": out},
        t0,
        {"train": len(train), "val": len(val)},
    )
    print(f"{len(train)} training / {len(val)} validation sequences, {train.n_channels} channels at {train.rate:g} Hz -> {out}")
    return EXIT_OK


def _load_split(path, name):
    d = Path(path)
    return Dataset.load(d / name) if (d / name).exists() else Dataset.load(d)


def cmd_train(args) -> int:
    t0 = time.time()
    preset = X.get_preset(args.preset)
    train, val = _load_split(args.data, "train"), _load_split(args.data, "val")
    units = args.units or (preset.units if args.arch == "pitch" else preset.auto_units)
    epochs = args.epochs if args.epochs is not None else (preset.epochs if args.arch == "pitch" else preset.auto_epochs)
    cfg = nn.TrainConfig(
        epochs=epochs,
        lr=args.lr or preset.lr,
        decay=preset.decay,
        decay_every=preset.decay_every,
        seed=args.seed,
        pretrain_epochs=args.pretrain_epochs if args.pretrain_epochs is not None else preset.auto_pretrain_epochs,
    )
    if args.arch == "pitch":
        net = nn.PitchOnlyNet(train.channels, args.k, units, args.stride, seed=args.seed, rate=train.rate)
        net, curve = nn.train_pitch_only(net, train, val, cfg)
    else:
        state = tuple(c for c in train.channels if c not in ch.CONSTANT)
        wps = tuple(c for c in train.channels if c in ch.CONSTANT) if args.waypoints else ()
        if not wps:
            train = X.take_channels(train, state)
            val = X.take_channels(val, state)
        net = nn.AutoregressiveNet(state, units, wps, seed=args.seed, rate=train.rate)
        net, curve = nn.train_autoregressive(net, train, val, cfg, args.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out)
    curve_path = out.with_suffix(".curve.json")
    curve_path.write_text(json.dumps(curve, indent=1))
    res = nn.evaluate(net, val, None if args.arch == "pitch" else args.k / val.rate)
    write_manifest(out, "train", {"arch": args.arch, "units": units, "k": args.k, "stride": args.stride, "train": cfg.to_dict()}, {"seed": args.seed}, {"data": args.data}, {"checkpoint": out, "curve": curve_path}, t0, res)
    print(f"validation RMSE {res['rmse_rad']!r} rad (persistence {res['persistence_rmse_rad']!r}) -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    net = nn.load_net(args.model)
    ds = _load_split(args.data, args.split)
    names = tuple(net.channels) + tuple(getattr(net, "waypoint_channels", ()))
    if ds.channels != names:
        ds = X.take_channels(ds, names)
    res = nn.evaluate(net, ds, args.horizon)
    if args.out:
        write_manifest(Path(args.out), "eval", {"horizon_s": args.horizon, "split": args.split}, {}, {"checkpoint": args.model, "data": args.data}, {}, t0, res)
    print(json.dumps(res))
    return EXIT_OK


def _study_data(args, preset, rates):
    model = _model(args)
    n = args.episodes or preset.n_episodes
    eps = X.simulate_at_rates(model, n, X.episode_seed_base(args.seed), rates, preset.settle_time, args.threads)
    return model, eps


def cmd_ablate(args) -> int:
    t0 = time.time()
    preset = X.get_preset(args.preset)
    model = _model(args)
    n = args.episodes or preset.ablation_episodes
    eps = X.simulate_at_rates(model, n, X.episode_seed_base(args.seed), [preset.rate], preset.settle_time, args.threads)[preset.rate]
    train, val = X.training_data(eps, preset, args.seed, groups=sorted(ch.FEATURE_GROUPS))
    state = X.run_ablation(train, val, preset, args.seed)
    rep = X.ablation_report(state, train.stats.of(ch.PITCH)[1], args.seed)
    out = Path(args.out)
    files = X.emit_report(rep, out)
    (out / "ablation_state.json").write_text(json.dumps(state.to_dict(), indent=2))
    write_manifest(out, "ablate", preset.to_dict(), {"root": args.seed}, {"model": args.model}, {"report": files[0]}, t0, {"order": state.order})
    print("elimination order:", " ".join(map(str, state.order)))
    return EXIT_OK


def cmd_horizon(args) -> int:
    t0 = time.time()
    preset = X.get_preset(args.preset)
    _, eps = _study_data(args, preset, [preset.rate, preset.auto_rate])
    data = {
        "pitch": X.training_data(eps[preset.rate], preset, args.seed),
        "auto": X.training_data(eps[preset.auto_rate], preset, args.seed),
    }
    rep = X.run_horizon_study(data, preset, args.seed)
    files = X.emit_report(rep, args.out)
    write_manifest(Path(args.out), "horizon", preset.to_dict(), {"root": args.seed}, {"model": args.model}, {"report": files[0]}, t0, rep.summary())
    for c, v in rep.summary().items():
        print(f"{c}: {v:.6g} rad")
    return EXIT_OK


def cmd_perturb(args) -> int:
    t0 = time.time()
    preset = X.get_preset(args.preset)
    model, eps = _study_data(args, preset, [preset.rate])
    train, val = X.training_data(eps[preset.rate], preset, args.seed)
    net = X.train_pitch(preset, train, val, X.stage_seed(args.seed, "perturb", "net"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "nominal_net.npz")
    rep = X.run_perturbation_study(model, net, preset, args.seed, threads=args.threads)
    files = X.emit_report(rep, out)
    deg = {f"{g}@{lvl:g}": v for (g, lvl), v in X.degradation(rep).items()}
    write_manifest(out, "perturb", preset.to_dict(), {"root": args.seed}, {"model": args.model}, {"report": files[0], "net": out / "nominal_net.npz"}, t0, deg)
    for k, v in deg.items():
        print(f"{k}: {100 * v:+.2f}%")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    model = _model(args)
    checks = verify.run_all(model)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return EXIT_OK if ok else EXIT_FAILED_CHECK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="uvms-pitch",
        description="Simulate an underwater vehicle-manipulator system and forecast its pitch.",
        epilog="Precedence: model file < UVMS_<OPTION> environment variables < flags. "
        "--threads 1 gives bit-identical results for a given seed.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--threads", type=int, default=_env("threads", os.cpu_count() or 1, int))
        if seed:
            sp.add_argument("--seed", type=int, default=_env("seed", 0, int))

    def model_opt(sp):
        sp.add_argument("--model", default=_env("model"), help="model YAML (default: packaged model)")
        sp.add_argument("--payload", type=float, default=_env("payload", 0.0, float), help="payload mass at the gripper, kg")

    sp = sub.add_parser("simulate", help="simulate episodes")
    model_opt(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rate", type=float, default=_env("rate", 1000.0, float), help="stored rate; below 1000 Hz episodes are smoothed and downsampled")
    sp.add_argument("--settle", type=float, default=_env("settle", 2.0, float))
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("dataset", help="episodes -> normalized train/validation sequences")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--rate", type=float, default=_env("rate", 50.0, float))
    sp.add_argument("--groups", default=_env("groups", "all"), help="comma-separated group ids, 'top5' or 'all'")
    sp.add_argument("--split", type=float, default=_env("split", 0.95, float))
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train a forecaster")
    sp.add_argument("--arch", choices=("pitch", "auto"), default=_env("arch", "pitch"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--preset", choices=sorted(X.PRESETS), default=_env("preset", "desk"))
    sp.add_argument("--units", type=int, default=_env("units", None, int))
    sp.add_argument("--epochs", type=int, default=_env("epochs", None, int))
    sp.add_argument("--pretrain-epochs", type=int, default=_env("pretrain_epochs", None, int))
    sp.add_argument("--lr", type=float, default=_env("lr", None, float))
    sp.add_argument("--k", type=int, default=_env("k", 25, int), help="outputs (pitch) or forecast steps (auto)")
    sp.add_argument("--stride", type=int, default=_env("stride", 1, int))
    sp.add_argument("--waypoints", action="store_true", help="feed waypoint constants to the autoregressive head")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="forecast RMSE of a checkpoint")
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--horizon", type=float, default=_env("horizon", None, float))
    sp.add_argument("--out", default=None, help="directory for the run manifest")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_eval)

    for name, func, text in (
        ("ablate", cmd_ablate, "backwards elimination over feature groups"),
        ("horizon", cmd_horizon, "RMSE against forecast horizon"),
        ("perturb", cmd_perturb, "robustness to perturbed hydrodynamics"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--preset", choices=sorted(X.PRESETS), default=_env("preset", "desk"))
        sp.add_argument("--out", required=True)
        sp.add_argument("--episodes", type=int, default=_env("episodes", None, int), help="override the preset episode count")
        model_opt(sp)
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="physics invariants and gradient checks")
    model_opt(sp)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args):
            return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError, PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EpisodeAborted, UnstableModelError, DatasetRejectionError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except nn.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
