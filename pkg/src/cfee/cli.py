"""Command line entry point: ``cfee {gen-data,train,eval,compare,verify}``.

Configs are flat TOML files whose keys are the field names of
:class:`SystemParams`, :class:`TrainConfig`, :class:`Architecture` and
:class:`NormalizationParams`.  Unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from .baselines import equal_power, multistart_ascent, random_power
from .checks import equivariance, gradcheck
from .gnn import Architecture, load_checkpoint, save_checkpoint
from .objective import sum_ee
from .scenario import SystemParams, gain_statistics, generate_dataset, load_dataset, save_dataset
from .toy import run_toy
from .training import (
    NormalizationParams,
    TrainConfig,
    evaluate_policy,
    load_train_state,
    midpoint_power,
    save_train_state,
    train,
)

log = logging.getLogger("cfee")


class ConfigError(ValueError):
    pass


_NESTED = {"arch": Architecture, "norm": NormalizationParams}


def _names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def known_keys() -> set[str]:
    keys = set(_names(SystemParams))
    keys |= {k for k in _names(TrainConfig) if k not in _NESTED}
    for cls in _NESTED.values():
        keys |= set(_names(cls))
    return keys


def parse_config(text: str) -> tuple[SystemParams, TrainConfig]:
    """Build (SystemParams, TrainConfig) from flat TOML; missing keys keep their defaults."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    unknown = sorted(set(raw) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, val in raw.items():
        if isinstance(val, (dict, list)):
            raise ConfigError(f"config key {key!r} must be a scalar")

    def pick(cls):
        return {k: raw[k] for k in _names(cls) if k in raw}

    try:
        system = SystemParams(**pick(SystemParams))
        nested = {name: cls(**pick(cls)) for name, cls in _NESTED.items()}
        top = {k: v for k, v in pick(TrainConfig).items() if k not in _NESTED}
        config = TrainConfig(**top, **nested)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return system, config


def read_config(path) -> tuple[SystemParams, TrainConfig]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _state_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".state.npz")


def _norm_from(args) -> NormalizationParams:
    return read_config(args.config)[1].norm if args.config else NormalizationParams()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    system, config = read_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    if args.count < 1:
        raise ConfigError("count must be >= 1")
    t0 = time.perf_counter()
    data = generate_dataset(system, args.count, seed)
    save_dataset(data, args.out)
    mean, std = gain_statistics(data)
    print(f"wrote {args.count} samples ({system.n_aps} APs, {system.n_ues} UEs) to {args.out} "
          f"in {time.perf_counter() - t0:.1f}s")
    print(f"gain mean={mean:.4e} std={std:.4e}")
    return 0


def cmd_train(args) -> int:
    system, config = read_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    data = load_dataset(args.data)
    if data.params.n_aps != system.n_aps or data.params.n_ues != system.n_ues:
        raise ConfigError(f"dataset is {data.params.n_aps}x{data.params.n_ues} but config says "
                          f"{system.n_aps}x{system.n_ues}")
    state = best = None
    if args.resume:
        sidecar = _state_path(args.out_checkpoint)
        if not sidecar.exists():
            raise ConfigError(f"nothing to resume: {sidecar} not found")
        state = load_train_state(sidecar, config)
        best = load_checkpoint(args.out_checkpoint)
        print(f"resuming at iteration {state.iteration}")
    result = train(config, data, state=state, metrics_path=args.metrics, checkpoint_path=args.out_checkpoint,
                   progress=args.verbose, append_metrics=args.resume, best=best)
    save_checkpoint(result.best_policy, args.out_checkpoint)
    save_train_state(result.state, _state_path(args.out_checkpoint))
    print(f"trained to iteration {result.state.iteration}; best monitor EE {result.best_ee:.6g} bit/J "
          f"-> {args.out_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    policy = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    norm = _norm_from(args)
    gains = data.gains()
    t0 = time.perf_counter()
    P = midpoint_power(policy, gains, data.params, norm)
    per_sample_s = (time.perf_counter() - t0) / len(gains)
    mean, per = evaluate_policy(policy, gains, data.params, norm)
    if args.per_sample:
        with open(args.per_sample, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "ee_bit_per_joule", "total_power_w"])
            for i, (e, p) in enumerate(zip(per, P.sum(axis=(-1, -2)))):
                w.writerow([i, repr(float(e)), repr(float(p))])
    print(f"samples={len(gains)}")
    print(f"mean_ee_bit_per_joule={mean:.6e}")
    print(f"inference_ms_per_sample={1e3 * per_sample_s:.3f}")
    return 0


def compare_table(policy, data, norm: NormalizationParams, seed: int = 0, restarts: int = 8, steps: int = 300):
    """Rows of (statistic, gnn, equal, random, multistart) over the dataset."""
    gains = data.gains()
    params = data.params
    p_max = policy.p_max
    allocs = {
        "gnn": midpoint_power(policy, gains, params, norm),
        "equal": equal_power(gains, params, p_max),
        "random": random_power(gains, np.random.default_rng([seed, 0]), p_max),
        "multistart": multistart_ascent(gains, params, restarts, steps, p_max, rng=np.random.default_rng([seed, 1])),
    }
    ee = {k: np.atleast_1d(sum_ee(gains, P, params)) for k, P in allocs.items()}
    ref = ee["multistart"].mean()
    rows = [
        ["mean_ee_bit_per_joule"] + [float(v.mean()) for v in ee.values()],
        ["median_ee_bit_per_joule"] + [float(np.median(v)) for v in ee.values()],
        ["ratio_to_multistart"] + [float(v.mean() / ref) if ref > 0 else math.nan for v in ee.values()],
    ]
    return ["statistic"] + list(ee), rows


def cmd_compare(args) -> int:
    policy = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    header, rows = compare_table(policy, data, _norm_from(args), args.seed, args.restarts, args.steps)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [f"{v:.6e}" for v in row[1:]])
    finally:
        if args.out:
            out.close()
    return 0


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.suite == "gradcheck":
        result = gradcheck(seed=seed)
        print(result.line())
        return 0 if result.passed else 1
    if args.suite == "equivariance":
        result = equivariance(seed=seed)
        print(result.line())
        return 0 if result.passed else 1
    report = run_toy(50, seed)
    ok = report.support_rate >= 0.8 and report.support_hits > report.plain_hits
    print(f"support-regularized: {report.support_hits}/{report.n_seeds} ({report.support_rate:.0%}) reached the global optimum")
    print(f"plain ascent:        {report.plain_hits}/{report.n_seeds} ({report.plain_rate:.0%}) reached the global optimum")
    print(f"{'PASS' if ok else 'FAIL'} toy1d")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfee", description="GNN energy-efficient power allocation for cell-free MIMO")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a channel dataset")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("config")
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the state saved next to the checkpoint")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at the support midpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="config holding the normalisation constants")
    p.add_argument("--per-sample", help="write per-sample EE to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="GNN vs equal, random and multistart allocation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run a self-check")
    p.add_argument("--suite", required=True, choices=["gradcheck", "equivariance", "toy1d"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)
    return ap


def _thread_cap() -> int | None:
    raw = os.environ.get("CFEE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CFEE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CFEE_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=_thread_cap()):
            return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"cfee {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
