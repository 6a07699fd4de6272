"""Self-checks shared by the ``verify`` command and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gnn import Architecture, flatten_policy, init_policy, policy_forward, unflatten_policy
from .objective import draw_uniform, stochastic_objective
from .scenario import SystemParams, generate_sample, sample_rng
from .training import NormalizationParams, normalize


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float  # worst error seen
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} {self.detail}".rstrip()


def gradient_errors(g: np.ndarray, fd: np.ndarray, abs_floor: float = 1e-8):
    """Relative error per entry, switching to absolute error where both are below ``abs_floor``."""
    g, fd = np.asarray(g), np.asarray(fd)
    scale = np.maximum(np.abs(g), np.abs(fd))
    small = scale < abs_floor
    rel = np.abs(g - fd) / np.where(small, 1.0, scale)
    return rel, small


def central_difference(f, x: np.ndarray, idx, eps: float) -> float:
    """Fourth-order central difference of scalar ``f`` along entry ``idx`` of ``x``."""
    x0 = x[idx]
    vals = []
    for k in (2, 1, -1, -2):
        x[idx] = x0 + k * eps
        vals.append(f())
    x[idx] = x0
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)


def _pattern(f) -> list:
    with ad.relu_patterns() as probe:
        f()
    return probe


def stencil_is_smooth(f, x: np.ndarray, idx, eps: float) -> bool:
    """True when no ReLU changes sign anywhere on the stencil around ``x[idx]``."""
    x0 = x[idx]
    ref = _pattern(f)
    try:
        for k in (2, 1, -1, -2):
            x[idx] = x0 + k * eps
            if any(not np.array_equal(p, q) for p, q in zip(ref, _pattern(f))):
                return False
    finally:
        x[idx] = x0
    return True


def smooth_difference(f, x: np.ndarray, idx, eps: float, shrink: int = 3):
    """Central difference with a step small enough to stay on one linear piece.

    Returns None when even ``eps / 10**shrink`` still straddles a kink.
    """
    for _ in range(shrink + 1):
        if stencil_is_smooth(f, x, idx, eps):
            return central_difference(f, x, idx, eps)
        eps /= 10.0
    return None


def _small_instance(rng: np.random.Generator, i: int):
    K = int(rng.integers(1, 5))
    L = int(rng.integers(1, 4))
    params = SystemParams(n_aps=L, n_ues=K, n_antennas=int(rng.integers(1, 4)))
    return params, generate_sample(params, sample_rng(int(rng.integers(1 << 30)), i))


def gradcheck(n_instances: int = 20, seed: int = 0, coords: int = 24, tol: float = 1e-4,
              abs_floor: float = 1e-8, eps: float = 1e-4, arch: Architecture = Architecture(n_layers=2, sinr_depth=2, hidden=8)) -> CheckResult:
    """End-to-end gradient of the training loss against finite differences.

    Each instance draws a random system with K <= 4, L <= 3, a fresh policy,
    a batch of two samples, fixed uniform draws and a positive kappa, then
    compares ``coords`` randomly chosen parameter entries (plus every entry of
    the smallest tensor) with a fourth-order central difference.  ReLU networks
    are only piecewise smooth: a stencil that crosses a kink is retried with a
    smaller step and skipped (and counted) if it still crosses one; more than 5% skipped
    entries fails the check.
    """
    rng = np.random.default_rng(seed)
    norm = NormalizationParams()
    worst = 0.0
    checked = skipped = 0
    for i in range(n_instances):
        params, s0 = _small_instance(rng, 2 * i)
        s1 = generate_sample(params, sample_rng(int(rng.integers(1 << 30)), 2 * i + 1))
        gains = np.stack([s0.gains, s1.gains])
        policy = init_policy(rng, arch, 1.0)
        # random biases keep every ReLU off its kink (zero inputs + zero bias sit exactly on it)
        arrays = [a + rng.uniform(-0.2, 0.2, a.shape) if a.ndim == 1 else a.copy() for a in flatten_policy(policy)]
        feats = normalize(gains, norm)
        u = draw_uniform(rng, (2, params.n_ues, params.n_aps), 4)
        kappa = float(rng.uniform(0.0, 0.5))

        def loss_of(leaves):
            a, w = policy_forward(unflatten_policy(policy, leaves), feats)
            loss, _ = stochastic_objective(gains, a, w, kappa, 4, params=params, bandwidth=1.0, u=u)
            return loss

        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in arrays]
        grads = tape.gradient(loss_of(leaves), leaves)

        picks = [(int(np.argmin([a.size for a in arrays])), None)]
        for _ in range(coords):
            t = int(rng.integers(len(arrays)))
            picks.append((t, tuple(int(rng.integers(n)) for n in arrays[t].shape)))
        for t, idx in picks:
            idxs = list(np.ndindex(arrays[t].shape)) if idx is None else [idx]
            for j in idxs:
                fd = smooth_difference(lambda: float(loss_of(arrays).data), arrays[t], j, eps)
                if fd is None:
                    skipped += 1
                    continue
                rel, _ = gradient_errors(grads[t][j], fd, abs_floor)
                worst = max(worst, float(rel))
                checked += 1
    passed = worst < tol and skipped <= 0.05 * (checked + skipped)
    return CheckResult("gradcheck", passed, worst, f"({checked} entries, {skipped} skipped at kinks, {n_instances} instances)")


def permute_gains(gains: np.ndarray, ue_perm: np.ndarray, ap_perm: np.ndarray) -> np.ndarray:
    """Relabel UEs and APs of (..., L, K, K) gains."""
    g = gains[..., ap_perm, :, :]
    return g[..., ue_perm, :][..., ue_perm]


def equivariance(n_samples: int = 100, seed: int = 0, params: SystemParams | None = None,
                 arch: Architecture = Architecture(hidden=8), policy=None, tol: float = 1e-9) -> CheckResult:
    """Outputs for relabelled inputs must be the relabelled outputs."""
    rng = np.random.default_rng(seed)
    params = SystemParams(n_aps=4, n_ues=5) if params is None else params
    policy = init_policy(rng, arch, 1.0) if policy is None else policy
    norm = NormalizationParams()
    gains = np.stack([generate_sample(params, sample_rng(seed, i)).gains for i in range(n_samples)])
    ue = np.stack([rng.permutation(params.n_ues) for _ in range(n_samples)])
    ap = np.stack([rng.permutation(params.n_aps) for _ in range(n_samples)])
    permuted = np.stack([permute_gains(g, u, p) for g, u, p in zip(gains, ue, ap)])

    a0, w0 = (t.data for t in policy_forward(policy, normalize(gains, norm)))
    a1, w1 = (t.data for t in policy_forward(policy, normalize(permuted, norm)))
    worst = 0.0
    for i in range(n_samples):
        for x0, x1 in ((a0[i], a1[i]), (w0[i], w1[i])):
            expected = x0[ue[i]][:, ap[i]]
            worst = max(worst, float(np.max(np.abs(expected - x1))))
    return CheckResult("equivariance", worst < tol, worst, f"({n_samples} samples)")
