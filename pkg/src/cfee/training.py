"""Unsupervised training of the support policy and deterministic evaluation."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gnn import (
    Architecture,
    PolicyParams,
    flatten_policy,
    init_policy,
    policy_forward,
    save_checkpoint,
    unflatten_policy,
)
from .objective import KappaState, draw_uniform, ee_tensor, stochastic_objective, sum_ee, update_kappa
from .scenario import Dataset, SystemParams, observed_gains, serve_mask

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "loss_L", "mean_ee_bit_per_joule", "psi", "kappa", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NormalizationParams:
    mu_prime: float = 1e-11
    sigma_prime: float = 1e-10

    def __post_init__(self):
        if not self.sigma_prime > 0:
            raise ValueError("sigma_prime must be > 0")


def normalize(gains, norm: NormalizationParams) -> np.ndarray:
    return (np.asarray(gains, dtype=np.float64) - norm.mu_prime) / norm.sigma_prime


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 120_000
    batch_size: int = 64
    lr_init: float = 1e-3
    lr_final: float = 1e-7
    mc_samples: int = 16
    kappa_step: float = 1e-3
    kappa_window: int = 100
    p_max: float = 1.0
    seed: int = 0
    norm: NormalizationParams = field(default_factory=NormalizationParams)
    eval_every: int = 500
    arch: Architecture = field(default_factory=Architecture)
    monitor_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if self.mc_samples < 1 or self.eval_every < 1:
            raise ValueError("mc_samples and eval_every must be >= 1")
        if self.p_max <= 0:
            raise ValueError("p_max must be > 0")


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Geometric decay from ``lr_init`` at 0 to ``lr_final`` at ``total_iterations``."""
    total = max(config.total_iterations, 1)
    frac = min(max(iteration / total, 0.0), 1.0)
    return config.lr_init * (config.lr_final / config.lr_init) ** frac


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
        """One descent step; returns new parameter arrays."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass
class TrainState:
    policy: PolicyParams
    adam: Adam
    kappa: KappaState
    iteration: int
    rng: np.random.Generator  # Monte-Carlo draws
    data_rng: np.random.Generator  # batch shuffling
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cursor: int = 0


def init_state(config: TrainConfig) -> TrainState:
    seed = int(config.seed)
    policy = init_policy(np.random.default_rng([seed, 0]), config.arch, config.p_max)
    return TrainState(
        policy=policy,
        adam=Adam(),
        kappa=KappaState(delta_kappa=config.kappa_step, window=config.kappa_window),
        iteration=0,
        rng=np.random.default_rng([seed, 1]),
        data_rng=np.random.default_rng([seed, 2]),
    )


def _policy_inputs(gains: np.ndarray, params: SystemParams, norm: NormalizationParams):
    if params.serve_threshold is None:
        return normalize(gains, norm), None
    mask = np.swapaxes(serve_mask(gains, params.serve_threshold), -1, -2).astype(np.float64)
    return normalize(observed_gains(gains, params.serve_threshold), norm), mask


def _diagnose(gains, a, width, u, params) -> str:
    P = a[..., None, :, :] + width[..., None, :, :] * u
    ee = ee_tensor(np.expand_dims(gains, -4), P, params, 1.0).data
    psi = width.sum(axis=(-1, -2))
    for i in range(len(gains)):
        if not np.all(np.isfinite(a[i])) or not np.all(np.isfinite(width[i])):
            return f"sample {i}: policy output (a or width) is not finite"
        if not np.all(np.isfinite(ee[i])):
            return f"sample {i}: energy-efficiency term is not finite"
        if not np.isfinite(psi[i]):
            return f"sample {i}: support penalty is not finite"
    return "loss is not finite"


def train_step(state: TrainState, gains: np.ndarray, config: TrainConfig, params: SystemParams):
    """One gradient-ascent step on the batch ``gains`` (B, L, K, K).

    Returns ``(new_state, metrics)``; ``state`` itself is left untouched.
    """
    gains = np.asarray(gains, dtype=np.float64)
    if gains.ndim != 4 or len(gains) == 0:
        raise ValueError("batch must be a non-empty (B, L, K, K) array")
    rng = copy.deepcopy(state.rng)
    kappa = state.kappa.kappa
    lr = lr_at(state.iteration, config)

    features, mask = _policy_inputs(gains, params, config.norm)
    tape = ad.Tape()
    leaves = [tape.leaf(p) for p in flatten_policy(state.policy)]
    a, width = policy_forward(unflatten_policy(state.policy, leaves), features, mask)
    u = draw_uniform(rng, a.shape, config.mc_samples)
    loss, _ = stochastic_objective(gains, a, width, kappa, config.mc_samples, params=params, bandwidth=1.0, u=u)
    if not np.isfinite(loss.data):
        raise TrainingError(f"iteration {state.iteration}: {_diagnose(gains, a.data, width.data, u, params)}")

    grads = tape.gradient(loss, leaves)
    adam = copy.deepcopy(state.adam)
    new_arrays = adam.step(flatten_policy(state.policy), [-g for g in grads], lr)
    policy = unflatten_policy(state.policy, new_arrays)

    psi = float(width.data.sum(axis=(-1, -2)).mean())
    midpoint = a.data + 0.5 * width.data
    ee_mid = float(np.mean(sum_ee(gains, midpoint, params)))
    new_state = replace(
        state,
        policy=policy,
        adam=adam,
        kappa=update_kappa(state.kappa, psi),
        iteration=state.iteration + 1,
        rng=rng,
    )
    metrics = {"loss_L": float(loss.data), "mean_ee_bit_per_joule": ee_mid, "psi": psi, "kappa": kappa, "lr": lr}
    return new_state, metrics


def next_batch(state: TrainState, n: int, batch_size: int) -> np.ndarray:
    """Indices of the next batch; reshuffles after every full pass (mutates state)."""
    size = min(batch_size, n)
    if state.cursor + size > len(state.order):
        state.order = state.data_rng.permutation(n)
        state.cursor = 0
    idx = state.order[state.cursor : state.cursor + size]
    state.cursor += size
    return idx


def evaluate_policy(policy: PolicyParams, data, params: SystemParams, norm: NormalizationParams,
                    chunk: int = 256, bandwidth: float | None = None):
    """Deterministic evaluation at the support midpoint ``a + width/2``.

    ``data`` is a :class:`Dataset` or a gains array (n, L, K, K).  Returns
    ``(mean_ee, per_sample_ee)``.
    """
    gains = data.gains() if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if len(gains) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    per = np.empty(len(gains))
    for s in range(0, len(gains), chunk):
        g = gains[s : s + chunk]
        P = midpoint_power(policy, g, params, norm)
        per[s : s + chunk] = sum_ee(g, P, params, bandwidth)
    return float(per.mean()), per


def midpoint_power(policy: PolicyParams, gains: np.ndarray, params: SystemParams, norm: NormalizationParams):
    features, mask = _policy_inputs(gains, params, norm)
    a, width = policy_forward(policy, features, mask)
    return a.data + 0.5 * width.data


@dataclass
class TrainResult:
    policy: PolicyParams
    best_policy: PolicyParams
    best_ee: float
    metrics: list[dict]
    state: TrainState


def train(config: TrainConfig, dataset: Dataset, state: TrainState | None = None,
          metrics_path=None, checkpoint_path=None, progress: bool = False,
          append_metrics: bool = False, best: PolicyParams | None = None, on_step=None) -> TrainResult:
    """Run ``config.total_iterations`` steps (continuing from ``state`` if given).

    A metrics row is recorded every ``eval_every`` iterations; its EE column is
    the midpoint EE on a fixed monitor subset (the first ``monitor_size``
    samples), which also selects the best checkpoint.  With ``append_metrics``
    rows are appended to an existing CSV, and ``best`` seeds the best-so-far
    policy (both used when resuming).  ``on_step(iteration, metrics)`` is
    called after every step.
    """
    params = dataset.params
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    state = init_state(config) if state is None else state
    gains = dataset.gains()
    monitor = gains[: config.monitor_size]
    rows: list[dict] = []
    best_policy, best_ee = state.policy, -math.inf
    if best is not None:
        best_policy, best_ee = best, evaluate_policy(best, monitor, params, config.norm)[0]

    writer = None
    fh = None
    if metrics_path is not None:
        append = append_metrics and Path(metrics_path).exists()
        fh = open(metrics_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if not append:
            writer.writeheader()
    t0 = time.perf_counter()
    try:
        while state.iteration < config.total_iterations:
            it = state.iteration
            idx = next_batch(state, len(gains), config.batch_size)
            state, m = train_step(state, gains[idx], config, params)
            if on_step is not None:
                on_step(it, m)
            if it % config.eval_every == 0 or state.iteration == config.total_iterations:
                ee, _ = evaluate_policy(state.policy, monitor, params, config.norm)
                if ee > best_ee:
                    best_ee, best_policy = ee, state.policy
                    if checkpoint_path is not None:
                        save_checkpoint(best_policy, checkpoint_path)
                if it % config.eval_every == 0:
                    row = {"iteration": it, **m, "mean_ee_bit_per_joule": ee}
                    rows.append(row)
                    if writer is not None:
                        writer.writerow(row)
                        fh.flush()
                    if progress:
                        log.info("it %d  L=%.4g  EE=%.4g  psi=%.4g  kappa=%.4g  lr=%.2e  (%.0fs)",
                                 it, m["loss_L"], ee, m["psi"], m["kappa"], m["lr"], time.perf_counter() - t0)
    finally:
        if fh is not None:
            fh.close()
    if best_ee == -math.inf:
        best_ee, _ = evaluate_policy(state.policy, monitor, params, config.norm)
        best_policy = state.policy
        if checkpoint_path is not None:
            save_checkpoint(best_policy, checkpoint_path)
    return TrainResult(state.policy, best_policy, best_ee, rows, state)


# ---------------------------------------------------------------------------
# resumable training state (sidecar next to the checkpoint)


def save_train_state(state: TrainState, path) -> None:
    arrays = {f"p{i}": a for i, a in enumerate(flatten_policy(state.policy))}
    arrays.update({f"m{i}": a for i, a in enumerate(state.adam.m)})
    arrays.update({f"v{i}": a for i, a in enumerate(state.adam.v)})
    meta = {
        "iteration": state.iteration,
        "adam_t": state.adam.t,
        "kappa": state.kappa.kappa,
        "delta_kappa": state.kappa.delta_kappa,
        "window": state.kappa.window,
        "psi_history": list(state.kappa.psi_history),
        "kappa_iteration": state.kappa.iteration,
        "p_max": state.policy.p_max,
        "rng": state.rng.bit_generator.state,
        "data_rng": state.data_rng.bit_generator.state,
        "cursor": state.cursor,
    }
    arrays["order"] = state.order
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_train_state(path, config: TrainConfig) -> TrainState:
    template = init_state(config)
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        n = len(flatten_policy(template.policy))
        policy = unflatten_policy(template.policy, [z[f"p{i}"] for i in range(n)])
        policy.p_max = meta["p_max"]
        adam = Adam(t=meta["adam_t"])
        if meta["adam_t"]:
            adam.m = [z[f"m{i}"] for i in range(n)]
            adam.v = [z[f"v{i}"] for i in range(n)]
        order = z["order"]
    kappa = KappaState(meta["kappa"], meta["delta_kappa"], meta["window"], tuple(meta["psi_history"]),
                       meta["kappa_iteration"])
    rng, data_rng = np.random.default_rng(), np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    data_rng.bit_generator.state = meta["data_rng"]
    return TrainState(policy, adam, kappa, meta["iteration"], rng, data_rng, order, meta["cursor"])


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
