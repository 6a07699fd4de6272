"""Message passing over the complete AP graph with SINRnet edge/node functions.

Node features are feature-first cubes shaped (f, ..., L, K, K): axis -3
indexes the AP.
Each layer computes one message per node from that node's features alone and
broadcasts it; node i aggregates the mean of all *other* nodes' messages and
updates as ``gamma(concat(x_i, mean_j m_j))``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .sinrnet import Linear, SinrNetParams, diagonal_readout, init_sinrnet, sinrnet_forward

NODE_AXIS = -3
CHECKPOINT_MAGIC = b"CFPM"
CHECKPOINT_VERSION = 1


@dataclass
class GnnLayer:
    phi: SinrNetParams  # message (edge) network
    gamma: SinrNetParams  # node update network


@dataclass
class GnnParams:
    layers: list[GnnLayer]


@dataclass
class PolicyParams:
    alpha: GnnParams  # lower bound a
    beta: GnnParams  # width l = b - a
    p_max: float = 1.0


@dataclass(frozen=True)
class Architecture:
    n_layers: int = 2
    sinr_depth: int = 3
    hidden: int = 32

    def __post_init__(self):
        if self.n_layers < 1 or self.sinr_depth < 1:
            raise ValueError("n_layers and sinr_depth must be >= 1")
        if self.hidden % 4:
            raise ValueError("hidden width must be a multiple of 4")


class MessageCounter:
    """Counts node messages computed, for checking the broadcast-once scheme."""

    def __init__(self):
        self.count = 0


def init_gnn(rng: np.random.Generator, arch: Architecture, f_in: int = 1) -> GnnParams:
    h, V = arch.hidden, arch.sinr_depth
    layers = []
    f_x = f_in
    for n in range(arch.n_layers):
        last = n == arch.n_layers - 1
        phi = init_sinrnet(rng, [f_x] + [h] * V)
        g_widths = [f_x + h] + [h] * (V - 1) + [4 if last else h]
        gamma = init_sinrnet(rng, g_widths, head_out=1 if last else None)
        layers.append(GnnLayer(phi, gamma))
        f_x = h
    return GnnParams(layers)


def init_policy(rng: np.random.Generator, arch: Architecture = Architecture(), p_max: float = 1.0) -> PolicyParams:
    if p_max <= 0:
        raise ValueError("p_max must be > 0")
    return PolicyParams(init_gnn(rng, arch), init_gnn(rng, arch), float(p_max))


def message(phi: SinrNetParams, x, counter: MessageCounter | None = None):
    """Per-node messages, computed once per node from x_j only."""
    if counter is not None:
        counter.count += ad.as_tensor(x).shape[NODE_AXIS]
    return sinrnet_forward(phi, x)


def aggregate(messages):
    """Mean over neighbours j != i for every node i (zero for a single node)."""
    return ad.neighbor_mean(messages, NODE_AXIS)


def node_update(gamma: SinrNetParams, x, agg):
    return sinrnet_forward(gamma, ad.concat([x, agg], axis=0))


def gnn_forward(params: GnnParams, x, counter: MessageCounter | None = None):
    """Run all layers; returns the final (1, ..., L, K, K) node cubes."""
    for layer in params.layers:
        m = message(layer.phi, x, counter)
        x = node_update(layer.gamma, x, aggregate(m))
    return x


def gnn_readout(params: GnnParams, x, counter: MessageCounter | None = None):
    """Raw per-(UE, AP) scores shaped (..., K, L)."""
    out = diagonal_readout(gnn_forward(params, x, counter))  # (..., L, K)
    return ad.swapaxes(out, -1, -2)


def policy_forward(policy: PolicyParams, features, mask=None, counter: MessageCounter | None = None):
    """Support bounds ``(a, width)`` from normalised gain cubes.

    ``features`` is (..., L, K, K).  ``a = p_max * sigmoid(u_a)`` and
    ``width = (p_max - a) * sigmoid(u_w)`` so ``0 <= a <= a + width <= p_max``.
    ``mask`` (..., K, L) zeroes links an AP does not serve.
    """
    x = ad.expand_dims(ad.as_tensor(features), 0)
    u_a = gnn_readout(policy.alpha, x, counter)
    u_w = gnn_readout(policy.beta, x, counter)
    a = ad.scale(ad.sigmoid(u_a), policy.p_max)
    width = (policy.p_max - a) * ad.sigmoid(u_w)
    if mask is not None:
        a = a * mask
        width = width * mask
    return a, width


# ---------------------------------------------------------------------------
# flat parameter views


def _sinr_linears(p: SinrNetParams):
    yield from p.layers
    if p.head is not None:
        yield p.head


def _gnn_linears(g: GnnParams):
    for layer in g.layers:
        yield from _sinr_linears(layer.phi)
        yield from _sinr_linears(layer.gamma)


def policy_linears(policy: PolicyParams) -> list[Linear]:
    return list(_gnn_linears(policy.alpha)) + list(_gnn_linears(policy.beta))


def flatten_policy(policy: PolicyParams) -> list:
    """Weights and biases in deterministic order (alpha then beta, phi then gamma)."""
    out = []
    for lin in policy_linears(policy):
        out.extend((lin.weight, lin.bias))
    return out


def _rebuild_sinr(p: SinrNetParams, it) -> SinrNetParams:
    layers = [Linear(next(it), next(it)) for _ in p.layers]
    head = Linear(next(it), next(it)) if p.head is not None else None
    return SinrNetParams(layers, head)


def _rebuild_gnn(g: GnnParams, it) -> GnnParams:
    out = []
    for layer in g.layers:
        phi = _rebuild_sinr(layer.phi, it)
        gamma = _rebuild_sinr(layer.gamma, it)
        out.append(GnnLayer(phi, gamma))
    return GnnParams(out)


def unflatten_policy(template: PolicyParams, arrays) -> PolicyParams:
    """Same structure as ``template`` holding ``arrays`` (arrays or Tensors)."""
    it = iter(arrays)
    policy = PolicyParams(_rebuild_gnn(template.alpha, it), _rebuild_gnn(template.beta, it), template.p_max)
    if next(it, None) is not None:
        raise ValueError("too many arrays for this architecture")
    return policy


def n_parameters(policy: PolicyParams) -> int:
    return int(sum(np.size(a) for a in flatten_policy(policy)))


# ---------------------------------------------------------------------------
# checkpoint file


def _describe(policy: PolicyParams) -> list[int]:
    words = [2]
    for net in (policy.alpha, policy.beta):
        words.append(len(net.layers))
        for layer in net.layers:
            for sub in (layer.phi, layer.gamma):
                words += [len(sub.layers), int(sub.head is not None), sub.layers[0].f_in]
                words += [lin.f_out for lin in sub.layers]
                if sub.head is not None:
                    words.append(sub.head.f_out)
    return words


def _skeleton(words: list[int]) -> PolicyParams:
    it = iter(words)
    if next(it) != 2:
        raise ValueError("checkpoint must hold two networks")
    nets = []
    for _ in range(2):
        layers = []
        for _ in range(next(it)):
            subs = []
            for _ in range(2):
                depth, has_head, f_in = next(it), next(it), next(it)
                widths = [f_in] + [next(it) for _ in range(depth)]
                lins = [Linear(np.zeros((b, a)), np.zeros(b)) for a, b in zip(widths[:-1], widths[1:])]
                head = None
                if has_head:
                    f = next(it)
                    head = Linear(np.zeros((f, widths[-1])), np.zeros(f))
                subs.append(SinrNetParams(lins, head))
            layers.append(GnnLayer(*subs))
        nets.append(GnnParams(layers))
    return PolicyParams(nets[0], nets[1], 1.0)


def save_checkpoint(policy: PolicyParams, path) -> None:
    """CFPM file: magic, version, descriptor length + words (u32 LE), p_max, tensors (f64 LE)."""
    words = _describe(policy)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(words))]
    parts.append(struct.pack(f"<{len(words)}I", *words))
    parts.append(struct.pack("<d", policy.p_max))
    for arr in flatten_policy(policy):
        parts.append(np.ascontiguousarray(ad.value(arr), dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> PolicyParams:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CFPM checkpoint")
    version, n_words = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    words = list(struct.unpack_from(f"<{n_words}I", buf, off))
    off += 4 * n_words
    (p_max,) = struct.unpack_from("<d", buf, off)
    off += 8
    skel = _skeleton(words)
    arrays = []
    for arr in flatten_policy(skel):
        n = arr.size
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(arr.shape).copy())
        off += 8 * n
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    policy = unflatten_policy(skel, arrays)
    policy.p_max = p_max
    return policy
