"""One-dimensional two-bump experiment for the support-regularized search.

Each seed draws a function on [0, 1] made of a broad, lower bump and a
narrow, higher one.  Two optimisers run against it:

* support search: a uniform support ``[a, b]`` starting at the full
  interval, trained on ``E_u f(a + (b - a)*u) - kappa*(b - a)`` with the adaptive
  kappa rule; the answer is the support midpoint.
* plain ascent: gradient ascent on ``f(p)`` from a uniform random start.

A run succeeds when its answer lands within ``tol`` of the global argmax.
All seeds run side by side as one batch; every seed keeps its own kappa.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .objective import KappaState, update_kappa


@dataclass(frozen=True)
class TwoBump:
    """A batch of two-bump functions; every field is shaped (n,).

    Index 0 of each pair is the global (narrow, height 1) bump.
    """

    centers: np.ndarray  # (2, n)
    widths: np.ndarray
    heights: np.ndarray

    @property
    def n(self) -> int:
        return self.centers.shape[1]

    def tensor(self, p):
        """f(p) with p shaped (n,) or (n, M); differentiable in p."""
        p = ad.as_tensor(p)
        extra = (1,) * (p.ndim - 1)
        out = None
        for c, w, h in zip(self.centers, self.widths, self.heights):
            c, w, h = (v.reshape(v.shape + extra) for v in (c, w, h))
            z = (p - c) * (1.0 / w)
            t = ad.exp(ad.scale(ad.square(z), -0.5)) * h
            out = t if out is None else out + t
        return out

    def __call__(self, p):
        return self.tensor(np.asarray(p, dtype=np.float64)).data

    def argmax(self, grid: int = 200001) -> np.ndarray:
        x = np.linspace(0.0, 1.0, grid)
        return x[np.argmax(self(np.broadcast_to(x, (self.n, grid))), axis=1)]


def random_two_bump(rng: np.random.Generator, n: int) -> TwoBump:
    """Narrow global bump (height 1) plus a broad local one (height 0.6-0.8), centres > 0.35 apart."""
    centers = np.empty((2, n))
    for i in range(n):
        while True:
            c = rng.uniform(0.1, 0.9, size=2)
            if abs(c[0] - c[1]) > 0.35:
                break
        centers[:, i] = c
    widths = np.stack([rng.uniform(0.03, 0.05, n), rng.uniform(0.10, 0.15, n)])
    heights = np.stack([np.ones(n), rng.uniform(0.6, 0.8, n)])
    return TwoBump(centers, widths, heights)


class _Adam:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def ascend(self, x, g, lr):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mh = self.m / (1 - 0.9**self.t)
        vh = self.v / (1 - 0.999**self.t)
        return x + lr * mh / (np.sqrt(vh) + 1e-8)


@dataclass(frozen=True)
class ToyConfig:
    steps: int = 8000
    mc_samples: int = 32
    lr: float = 1e-2
    lr_final: float = 1e-3
    kappa_step: float = 1e-3
    kappa_window: int = 100
    tol: float = 0.01


def _lr(cfg: ToyConfig, t: int) -> float:
    return cfg.lr * (cfg.lr_final / cfg.lr) ** (t / max(cfg.steps - 1, 1))


def support_search(f: TwoBump, rng: np.random.Generator, cfg: ToyConfig = ToyConfig()):
    """Shrink ``[a, b]`` from [0, 1] for every function in the batch.

    The endpoints are the trainable coordinates, so the penalty ``kappa*(b - a)``
    pulls both ends inward equally.  Returns (midpoints, widths, kappa trace
    shaped (steps, n)).
    """
    n = f.n
    a = np.zeros(n)
    b = np.ones(n)
    opt = _Adam((2, n))
    kappas = [KappaState(delta_kappa=cfg.kappa_step, window=cfg.kappa_window) for _ in range(n)]
    trace = np.empty((cfg.steps, n))
    for t in range(cfg.steps):
        k = np.array([s.kappa for s in kappas])
        tape = ad.Tape()
        ta, tb = tape.leaf(a), tape.leaf(b)
        width = tb - ta
        u = rng.uniform(size=(n, cfg.mc_samples))
        p = ad.expand_dims(ta, -1) + ad.expand_dims(width, -1) * u
        objective = ad.mean(f.tensor(p), axis=-1) - width * k
        ga, gb = tape.gradient(ad.sum(objective), [ta, tb])
        a, b = opt.ascend(np.stack([a, b]), np.stack([ga, gb]), _lr(cfg, t))
        # projection onto 0 <= a <= b <= 1; a crossed pair meets in the middle
        a, b = np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)
        crossed = a > b
        a[crossed] = b[crossed] = 0.5 * (a[crossed] + b[crossed])
        kappas = [update_kappa(s, wi) for s, wi in zip(kappas, b - a)]
        trace[t] = [s.kappa for s in kappas]
    return 0.5 * (a + b), b - a, trace


def plain_ascent(f: TwoBump, rng: np.random.Generator, cfg: ToyConfig = ToyConfig()) -> np.ndarray:
    """Projected gradient ascent on f from one uniform random start per function."""
    p = rng.uniform(size=f.n)
    opt = _Adam(f.n)
    for t in range(cfg.steps):
        tape = ad.Tape()
        x = tape.leaf(p)
        (g,) = tape.gradient(ad.sum(f.tensor(x)), [x])
        p = np.clip(opt.ascend(p, g, _lr(cfg, t)), 0.0, 1.0)
    return p


@dataclass(frozen=True)
class ToyReport:
    n_seeds: int
    support_hits: int
    plain_hits: int

    @property
    def support_rate(self) -> float:
        return self.support_hits / self.n_seeds

    @property
    def plain_rate(self) -> float:
        return self.plain_hits / self.n_seeds


def run_toy(n_seeds: int = 50, seed: int = 0, cfg: ToyConfig = ToyConfig()) -> ToyReport:
    """Both optimisers on the same ``n_seeds`` random functions."""
    f = random_two_bump(np.random.default_rng([seed, 0]), n_seeds)
    target = f.argmax()
    mid, _, _ = support_search(f, np.random.default_rng([seed, 1]), cfg)
    p = plain_ascent(f, np.random.default_rng([seed, 2]), cfg)
    s_hits = int(np.sum(np.abs(mid - target) <= cfg.tol))
    p_hits = int(np.sum(np.abs(p - target) <= cfg.tol))
    return ToyReport(n_seeds, s_hits, p_hits)
