"""Sum energy efficiency and the support-regularized stochastic objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .scenario import ChannelSample, SystemParams

LN2 = math.log(2.0)


@dataclass(frozen=True)
class SupportBounds:
    """Uniform power support ``[a, a + width]``, arrays shaped (..., K, L)."""

    a: np.ndarray
    width: np.ndarray

    @property
    def b(self) -> np.ndarray:
        return self.a + self.width

    @property
    def midpoint(self) -> np.ndarray:
        return self.a + 0.5 * self.width


def _gains(sample) -> np.ndarray:
    return sample.gains if isinstance(sample, ChannelSample) else np.asarray(sample, dtype=np.float64)


def _gain_views(gains: np.ndarray):
    """Signal gains (..., K, L) and off-diagonal interference gains (..., K, K, L)."""
    K = gains.shape[-1]
    signal = np.swapaxes(np.diagonal(gains, axis1=-2, axis2=-1), -1, -2)
    cross = np.moveaxis(gains, -3, -1) * (1.0 - np.eye(K))[:, :, None]
    return signal, cross


def ee_per_user(gains, P, params: SystemParams, bandwidth: float | None = None):
    """Per-UE energy efficiency ``rate_k / (mu * sum_l p_kl + P_c)``.

    ``gains`` is (..., L, K, K) and ``P`` is (..., K, L), array or Tensor; the
    leading dimensions broadcast.  Returns a Tensor shaped (..., K).
    ``bandwidth`` defaults to ``params.bandwidth``; pass 1.0 for bit/J/Hz.
    """
    gains = np.asarray(gains, dtype=np.float64)
    if isinstance(P, np.ndarray) or not isinstance(P, ad.Tensor):
        P = ad.Tensor(P)
    K, L = P.shape[-2:]
    if gains.shape[-3:] != (L, K, K):
        raise ValueError(f"gains {gains.shape} do not match powers {P.shape}")
    B = params.bandwidth if bandwidth is None else bandwidth
    hs, hx = _gain_views(gains)
    signal = ad.sum(hs * P, axis=-1)
    interference = ad.sum(ad.sum(hx * ad.expand_dims(P, -3), axis=-1), axis=-1)
    sinr = signal / (interference + params.noise_power)
    rate = ad.scale(ad.log1p(sinr), B / LN2)
    power = ad.scale(ad.sum(P, axis=-1), params.amp_inefficiency) + params.static_power
    return rate / power


def ee_tensor(gains, P, params: SystemParams, bandwidth: float | None = None):
    """Sum EE over UEs, shape (...)."""
    return ad.sum(ee_per_user(gains, P, params, bandwidth), axis=-1)


def sum_ee(sample, P, params: SystemParams, bandwidth: float | None = None):
    """Sum energy efficiency in bit/Joule (bit/J/Hz with ``bandwidth=1``).

    Returns a float for a single (L, K, K) sample, otherwise an array over the
    leading batch dimensions.
    """
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0):
        raise ValueError("powers must be nonnegative")
    out = ee_tensor(_gains(sample), P, params, bandwidth).data
    return float(out) if out.ndim == 0 else out


def support_penalty(bounds):
    """Total support width ``sum(b - a)``.

    Accepts :class:`SupportBounds` (float result) or a width array/Tensor shaped
    (..., K, L), reduced over the last two axes.
    """
    if isinstance(bounds, SupportBounds):
        return float(np.sum(bounds.width))
    return ad.sum(ad.sum(bounds, axis=-1), axis=-1)


def draw_uniform(rng: np.random.Generator, shape, n_samples: int) -> np.ndarray:
    """U(0,1) draws shaped (..., M, K, L) for a support shaped (..., K, L)."""
    shape = tuple(shape)
    return rng.uniform(size=shape[:-2] + (n_samples,) + shape[-2:])


def stochastic_objective(gains, a, width, kappa: float, n_samples: int, rng=None, params=None,
                         bandwidth: float | None = None, u: np.ndarray | None = None):
    """Monte-Carlo estimate of ``E_u[J(a + width*u)] - kappa * psi``.

    ``a`` and ``width`` are (..., K, L) arrays or Tensors, ``gains`` is
    (..., L, K, K).  Over a batch the estimate is averaged.  The uniform draws
    ``u`` (either given or drawn from ``rng``) are the same values that flow
    through the gradient, so the estimate is differentiable in ``a`` and
    ``width``.

    Returns ``(L, powers)`` with ``L`` a scalar Tensor and ``powers`` the
    sampled allocations, shape (..., M, K, L).
    """
    if params is None:
        raise TypeError("params is required")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    a, width = ad.as_tensor(a), ad.as_tensor(width)
    if u is None:
        u = draw_uniform(rng, a.shape, n_samples)
    P = ad.expand_dims(a, -3) + ad.expand_dims(width, -3) * u
    gains = np.expand_dims(np.asarray(gains, dtype=np.float64), -4)
    ee = ee_tensor(gains, P, params, bandwidth)  # (..., M)
    expected = ad.mean(ee)
    psi = ad.mean(support_penalty(width))
    loss = expected - ad.scale(psi, kappa)
    return loss, P.data


@dataclass(frozen=True)
class KappaState:
    """State of the adaptive penalty weight.

    ``iteration`` is the 1-based index ``i`` of the next penalty value to be
    fed in; ``psi_history`` keeps at most ``window`` previous values.
    """

    kappa: float = 0.0
    delta_kappa: float = 1e-3
    window: int = 100
    psi_history: tuple[float, ...] = field(default=())
    iteration: int = 1

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.delta_kappa <= 0:
            raise ValueError("delta_kappa must be > 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if len(self.psi_history) > self.window:
            raise ValueError("psi_history longer than window")


def update_kappa(state: KappaState, psi: float) -> KappaState:
    """Raise kappa while the support stops shrinking, relax it otherwise.

    kappa stays 0 for the first ``window`` iterations.  Afterwards it grows by
    ``delta_kappa`` when the mean of the last ``window`` penalties is <= the
    current one, and shrinks by ``delta_kappa / 2`` (floored at 0) otherwise.
    """
    psi = float(psi)
    if psi < 0:
        raise ValueError("psi must be >= 0")
    h = state.window
    if state.iteration <= h:
        kappa = 0.0
    elif _recent_mean(state.psi_history, psi) <= psi:
        kappa = state.kappa + state.delta_kappa
    else:
        kappa = max(0.0, state.kappa - state.delta_kappa / 2.0)
    history = (state.psi_history + (psi,))[-h:]
    return replace(state, kappa=kappa, psi_history=history, iteration=state.iteration + 1)


def _recent_mean(history: tuple[float, ...], current: float) -> float:
    # a full window holds exactly h values; a short one (hand-built state) uses what it has
    return sum(history) / len(history) if history else current
