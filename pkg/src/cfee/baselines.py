"""Reference power allocators.

``multistart_ascent`` is a per-sample numerical optimiser used as the
near-optimal reference; it is a stand-in for a successive-convex-approximation
solver, not an implementation of one.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .objective import ee_tensor, sum_ee
from .scenario import ChannelSample, SystemParams


def _as_gains(sample) -> np.ndarray:
    return sample.gains if isinstance(sample, ChannelSample) else np.asarray(sample, dtype=np.float64)


def power_grid(p_max: float, grid: int) -> np.ndarray:
    return np.logspace(-6.0, np.log10(p_max), grid)


def equal_power(sample, params: SystemParams, p_max: float = 1.0, grid: int = 200) -> np.ndarray:
    """Best common power level for every (UE, AP) link on a log grid in [1e-6, p_max].

    Ties resolve to the smallest grid point.  Works on one sample (L, K, K) or
    a batch (n, L, K, K); returns (K, L) or (n, K, L).
    """
    if grid < 2:
        raise ValueError("grid must be >= 2")
    gains = _as_gains(sample)
    L, K = gains.shape[-3], gains.shape[-1]
    levels = power_grid(p_max, grid)
    P = np.broadcast_to(levels[:, None, None], (grid, K, L))
    ee = sum_ee(np.expand_dims(gains, -4), P, params, 1.0)  # (..., grid)
    best = levels[np.argmax(ee, axis=-1)]
    return np.broadcast_to(np.asarray(best)[..., None, None], gains.shape[:-3] + (K, L)).copy()


def random_power(sample, rng: np.random.Generator, p_max: float = 1.0) -> np.ndarray:
    gains = _as_gains(sample)
    L, K = gains.shape[-3], gains.shape[-1]
    return rng.uniform(0.0, p_max, size=gains.shape[:-3] + (K, L))


def multistart_ascent(sample, params: SystemParams, restarts: int = 8, steps: int = 300,
                      p_max: float = 1.0, rng: np.random.Generator | None = None,
                      step_init: float = 0.05, step_final: float = 1e-4, return_ee: bool = False):
    """Projected gradient ascent on the sum EE from ``restarts`` random starts.

    Each start is drawn uniformly in [0, p_max]^{K x L}; the step direction is
    the autodiff gradient rescaled per coordinate with running moment
    estimates (Adam style), the step length decays geometrically from
    ``step_init * p_max`` to ``step_final * p_max``, and every iterate is
    clipped back into the box.  The restarts run independently, so the first R
    starts of a larger run reproduce a smaller run exactly.

    Works on a single sample (L, K, K) or a batch (n, L, K, K).
    """
    if restarts < 1 or steps < 1:
        raise ValueError("restarts and steps must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    gains = _as_gains(sample)
    L, K = gains.shape[-3], gains.shape[-1]
    batch = gains.shape[:-3]
    P = rng.uniform(0.0, p_max, size=(restarts,) + batch + (K, L))
    P = np.moveaxis(P, 0, len(batch))  # (..., R, K, L)
    g_exp = np.expand_dims(gains, -4)
    m = np.zeros_like(P)
    v = np.zeros_like(P)
    b1, b2, eps = 0.9, 0.999, 1e-12
    for t in range(1, steps + 1):
        tape = ad.Tape()
        x = tape.leaf(P)
        total = ad.sum(ee_tensor(g_exp, x, params, 1.0))
        (g,) = tape.gradient(total, [x])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = p_max * step_init * (step_final / step_init) ** ((t - 1) / max(steps - 1, 1))
        direction = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        P = np.clip(P + step * direction, 0.0, p_max)
    ee = sum_ee(g_exp, P, params, 1.0)  # (..., R)
    best = np.argmax(ee, axis=-1)
    P_best = np.take_along_axis(P, best[..., None, None, None], axis=-3)[..., 0, :, :]
    if return_ee:
        return P_best, np.take_along_axis(ee, best[..., None], axis=-1)[..., 0]
    return P_best
