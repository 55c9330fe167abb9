"""Command-line interface: ``cfgp train | simulate | platoon | evaluate | export-interpretability``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``
(default ``$CFGP_OUTPUT_DIR/<command>``, or ``runs/<command>``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import filter_and_split, load_trajectories, resample
from .errors import ArgumentError, CfgpError
from .kernels import KERNELS, head_gram
from .meanmodel import load_params
from .metrics import EvalProtocol, evaluate_testset
from .sim import PlatoonConfig, simulate_ensemble, simulate_platoon
from .train import load_config, per_step_heads, train

OUTPUT_ENV = "CFGP_OUTPUT_DIR"
log = logging.getLogger("cfgp")


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: list
    code_version: str
    numeric_profile: dict
    wall_seconds: float = 0.0

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _numeric_profile() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine()}


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x) -> str:
    return repr(float(x))


def _load_ckpt(path):
    if not Path(path).is_file():
        raise ArgumentError(f"no such checkpoint: {path}")
    return load_params(path)


def _load_split(args):
    trajs = load_trajectories(args.data)
    if args.dt:
        trajs = [resample(t, args.dt) for t in trajs]
    return filter_and_split(trajs, min_duration=args.min_duration,
                            test_min_duration=args.test_min_duration, n_test=args.n_test,
                            train_frac=args.train_frac, seed=args.split_seed)


def _split_config(args) -> dict:
    return {k: getattr(args, k) for k in ("dt", "min_duration", "test_min_duration", "n_test",
                                          "train_frac", "split_seed")}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(args) -> RunManifest:
    if not Path(args.config).is_file():
        raise ArgumentError(f"no such config file: {args.config}")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    split = _load_split(args)
    out = _out_dir(args)
    _, report = train(split, cfg, out_dir=out)
    (out / "split.json").write_text(json.dumps(
        {"train": [t.pair_id for t in split.train], "val": [t.pair_id for t in split.val],
         "test": [t.pair_id for t in split.test], "dropped": split.dropped}, indent=2) + "\n")
    log.info("best epoch %d of %d", report.best_epoch, len(report.val_nll))
    return RunManifest(
        command="train", config={"train": dataclasses.asdict(cfg), "split": _split_config(args)},
        seeds={"train": cfg.seed, "split": args.split_seed},
        inputs={"config": str(args.config), "data": str(args.data), "data_sha256": _sha256(args.data)},
        outputs=[str(out / n) for n in ("model.ckpt", "losses.csv", "split.json")],
        code_version=__version__, numeric_profile=_numeric_profile())


def write_ensemble_csv(ens, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "t", "a", "v", "p", "s", "dv", "ell", "sigma", "collided"])
        for i, r in enumerate(ens.rollouts):
            for k in range(r.n_steps):
                w.writerow([i, _fmt(r.times[k]), _fmt(r.a[k]), _fmt(r.v[k]), _fmt(r.p[k]),
                            _fmt(r.s[k]), _fmt(r.dv[k]), _fmt(r.ell[k]), _fmt(r.sigma[k]),
                            int(r.collided[k])])


def write_matrix_csv(K, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in K:
            w.writerow([_fmt(x) for x in row])


def cmd_simulate(args) -> RunManifest:
    params = _load_ckpt(args.ckpt)
    kernel = args.kernel or params.kernel
    if args.rounds < 1:
        raise ArgumentError(f"--rounds must be >= 1, got {args.rounds}")
    trajs = load_trajectories(args.data)
    if args.dt:
        trajs = [resample(t, args.dt) for t in trajs]
    by_id = {t.pair_id: t for t in trajs}
    if args.pair not in by_id:
        raise ArgumentError(f"unknown pair_id {args.pair!r}")
    traj = by_id[args.pair]
    ens = simulate_ensemble(params, traj, args.t_start, args.horizon, args.rounds, kernel=kernel,
                            T_ctx=args.T_ctx, seed=args.seed)
    out = _out_dir(args)
    write_ensemble_csv(ens, out / "ensemble.csv")
    with open(out / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "t", "ell", "sigma"])
        for i, r in enumerate(ens.rollouts):
            for k in range(r.n_steps):
                w.writerow([i, _fmt(r.times[k]), _fmt(r.ell[k]), _fmt(r.sigma[k])])
    r = ens.rollouts[args.gram_round if args.gram_round < args.rounds else 0]
    n = min(r.n_steps, int(round(args.gram_window / traj.dt)))
    K = head_gram(kernel, r.times[:n] - r.times[0], r.ell[:n], r.sigma[:n])
    write_matrix_csv(K, out / "gram.csv")
    log.info("collision rate %.3f", ens.collision_rate)
    return RunManifest(
        command="simulate",
        config={"pair": args.pair, "t_start": args.t_start, "horizon": args.horizon,
                "rounds": args.rounds, "kernel": kernel, "T_ctx": args.T_ctx, "dt": args.dt,
                "gram_window": args.gram_window, "gram_round": args.gram_round},
        seeds={"rounds": [args.seed, args.seed + args.rounds - 1]},
        inputs={"ckpt": str(args.ckpt), "ckpt_sha256": _sha256(args.ckpt), "data": str(args.data),
                "data_sha256": _sha256(args.data)},
        outputs=[str(out / n) for n in ("ensemble.csv", "traces.csv", "gram.csv")],
        code_version=__version__, numeric_profile=_numeric_profile())


def cmd_platoon(args) -> RunManifest:
    params = _load_ckpt(args.ckpt)
    kernel = args.kernel or params.kernel
    cfg = PlatoonConfig(n_vehicles=args.n, base_speed=args.base_speed, amplitude=args.amplitude,
                        ramp=args.ramp, hold=args.hold, warmup=args.warmup,
                        pre_hold=args.pre_hold, initial_gap=args.gap,
                        vehicle_length=args.vehicle_length, horizon=args.horizon, dt=args.dt,
                        seed=args.seed)
    res = simulate_platoon(params, cfg, kernel=kernel, T_ctx=args.T_ctx)
    out = _out_dir(args)
    V, P = res.speeds(), res.positions()
    lead_a = np.diff(res.lead_v) / cfg.dt
    with open(out / "platoon.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle", "t", "a", "v", "p", "s"])
        for j in range(cfg.n_vehicles):
            a = lead_a if j == 0 else res.followers[j - 1].a
            s = None if j == 0 else res.followers[j - 1].s
            for k in range(len(a)):
                w.writerow([j, _fmt(res.times[k]), _fmt(a[k]), _fmt(V[j, k]), _fmt(P[j, k]),
                            "" if s is None else _fmt(s[k])])
    with open(out / "timespace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"p{j}" for j in range(cfg.n_vehicles)])
        for k, t in enumerate(res.times):
            w.writerow([_fmt(t)] + [_fmt(x) for x in P[:, k]])
    n_coll = sum(f.any_collision for f in res.followers)
    if n_coll:
        log.warning("%d of %d followers collided", n_coll, len(res.followers))
    return RunManifest(
        command="platoon", config={"platoon": dataclasses.asdict(cfg), "kernel": kernel,
                                   "T_ctx": args.T_ctx},
        seeds={"followers": [cfg.seed, cfg.seed + cfg.n_vehicles - 2]},
        inputs={"ckpt": str(args.ckpt), "ckpt_sha256": _sha256(args.ckpt)},
        outputs=[str(out / "platoon.csv"), str(out / "timespace.csv")],
        code_version=__version__, numeric_profile=_numeric_profile())


def cmd_evaluate(args) -> RunManifest:
    labels = args.label or []
    if labels and len(labels) != len(args.ckpt):
        raise ArgumentError("--label must be given once per --ckpt")
    models = {}
    for i, path in enumerate(args.ckpt):
        params = _load_ckpt(path)
        label = labels[i] if labels else params.kernel
        if label in models:
            label = f"{label}-{i}"
        models[label] = params
    split = _load_split(args)
    if not split.test:
        raise ArgumentError("empty test split (set --n-test >= 1)")
    protocol = EvalProtocol(horizon=args.horizon, start_stride=args.stride, rounds=args.rounds,
                            T_ctx=args.T_ctx, seed=args.seed, point=args.point)
    table = evaluate_testset(models, split, protocol)
    out = _out_dir(args)
    table.write_csv(out / "scores.csv")
    table.write_raw_csv(out / "raw_scores.csv")
    return RunManifest(
        command="evaluate",
        config={"protocol": dataclasses.asdict(protocol), "split": _split_config(args),
                "models": {k: str(p) for k, p in zip(models, args.ckpt)}},
        seeds={"evaluate": args.seed, "split": args.split_seed},
        inputs={"ckpt": [str(p) for p in args.ckpt],
                "ckpt_sha256": [_sha256(p) for p in args.ckpt],
                "data": str(args.data), "data_sha256": _sha256(args.data)},
        outputs=[str(out / "scores.csv"), str(out / "raw_scores.csv")],
        code_version=__version__, numeric_profile=_numeric_profile())


def cmd_export_interpretability(args) -> RunManifest:
    params = _load_ckpt(args.ckpt)
    split = _load_split(args)
    batch, _, ell, _ = per_step_heads(params, split.train, args.T)
    out = _out_dir(args)
    X = batch.inputs.reshape(-1, batch.inputs.shape[-1])
    with open(out / "interpretability.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ell", "s", "dv", "v", "a"])
        for e, x, a in zip(ell.ravel(), X, batch.targets.ravel()):
            w.writerow([_fmt(e), _fmt(x[0]), _fmt(x[1]), _fmt(x[2]), _fmt(a)])
    return RunManifest(
        command="export-interpretability", config={"T": args.T, "split": _split_config(args)},
        seeds={"split": args.split_seed},
        inputs={"ckpt": str(args.ckpt), "ckpt_sha256": _sha256(args.ckpt), "data": str(args.data),
                "data_sha256": _sha256(args.data)},
        outputs=[str(out / "interpretability.csv")],
        code_version=__version__, numeric_profile=_numeric_profile())


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_split_args(p) -> None:
    g = p.add_argument_group("data split")
    g.add_argument("--dt", type=float, default=None, help="resample to this interval (s)")
    g.add_argument("--min-duration", type=float, default=30.0)
    g.add_argument("--test-min-duration", type=float, default=50.0)
    g.add_argument("--n-test", type=int, default=30)
    g.add_argument("--train-frac", type=float, default=0.7)
    g.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cfgp {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV}/<command>)")

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    _add_split_args(p)
    common(p)

    p = sub.add_parser("simulate", help="stochastic rollouts for one pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--t-start", type=float, required=True)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--kernel", choices=KERNELS, default=None)
    p.add_argument("--T-ctx", dest="T_ctx", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--gram-window", type=float, default=10.0, help="seconds covered by gram.csv")
    p.add_argument("--gram-round", type=int, default=0)
    common(p)

    p = sub.add_parser("platoon", help="platoon response to a trapezoidal lead maneuver")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--amplitude", type=float, default=5.0)
    p.add_argument("--base-speed", type=float, default=20.0)
    p.add_argument("--ramp", type=float, default=10.0)
    p.add_argument("--hold", type=float, default=20.0)
    p.add_argument("--warmup", type=float, default=30.0)
    p.add_argument("--pre-hold", type=float, default=10.0)
    p.add_argument("--gap", type=float, default=32.0)
    p.add_argument("--vehicle-length", type=float, default=4.5)
    p.add_argument("--horizon", type=float, default=1000.0)
    p.add_argument("--dt", type=float, default=0.2)
    p.add_argument("--kernel", choices=KERNELS, default=None)
    p.add_argument("--T-ctx", dest="T_ctx", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    common(p)

    p = sub.add_parser("evaluate", help="score checkpoints on the test split")
    p.add_argument("--ckpt", required=True, action="append")
    p.add_argument("--label", action="append", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--stride", type=float, default=5.0)
    p.add_argument("--rounds", type=int, default=200)
    p.add_argument("--T-ctx", dest="T_ctx", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--point", choices=("mean", "median"), default="mean")
    _add_split_args(p)
    common(p)

    p = sub.add_parser("export-interpretability", help="per-step ell with covariates")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, default=50, help="window length")
    _add_split_args(p)
    common(p)
    return parser


COMMANDS = {
    "train": cmd_train,
    "simulate": cmd_simulate,
    "platoon": cmd_platoon,
    "evaluate": cmd_evaluate,
    "export-interpretability": cmd_export_interpretability,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    else:
        limiter = nullcontext()
    t0 = time.perf_counter()
    try:
        with limiter:
            manifest = COMMANDS[args.command](args)
    except CfgpError as exc:
        print(f"cfgp {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    manifest.wall_seconds = time.perf_counter() - t0
    manifest.write(_out_dir(args) / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
