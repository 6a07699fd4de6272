"""Permutation-equivariant SINRnet layers over K x K channel-feature cubes.

Cubes are feature-first, shape (f, ..., K, K): row k is the receiving UE,
column j the UE whose MRT beam is transmitted.  Every layer applies one
affine map per relation category, a ReLU, and averages each category's
activations over the positions in that category; the four category blocks are
stacked along the feature axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

N_CATEGORIES = 4


def category_of(k: int, j: int, kp: int, jp: int, n_ues: int | None = None) -> int:
    """Category (1..4) of position (kp, jp) relative to output position (k, j).

    1: the position itself; 2: same receiver row; 3: same transmitter column;
    4: everything else.
    """
    if n_ues is not None:
        for i in (k, j, kp, jp):
            if not 0 <= i < n_ues:
                raise IndexError(f"UE index {i} outside [0, {n_ues})")
    if kp == k:
        return 1 if jp == j else 2
    return 3 if jp == j else 4


def category_sets(n_ues: int) -> list[list[list[int]]]:
    """Materialised category index sets.

    ``sets[k * K + j][c - 1]`` lists the flattened positions ``kp * K + jp``
    in category ``c`` relative to (k, j).
    """
    K = n_ues
    out = []
    for k in range(K):
        for j in range(K):
            groups = [[] for _ in range(N_CATEGORIES)]
            for kp in range(K):
                for jp in range(K):
                    groups[category_of(k, j, kp, jp) - 1].append(kp * K + jp)
            out.append(groups)
    return out


@dataclass
class Linear:
    weight: np.ndarray  # (f_out, f_in)
    bias: np.ndarray  # (f_out,)

    @property
    def f_in(self) -> int:
        return self.weight.shape[1]

    @property
    def f_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class SinrNetParams:
    """``layers[n].weight`` stacks the four per-category weight blocks row-wise.

    Rows ``c*f_out/4 : (c+1)*f_out/4`` hold the weight of category ``c + 1``.
    ``head`` is an optional per-position affine map without ReLU.
    """

    layers: list[Linear]
    head: Linear | None = None

    @property
    def f_in(self) -> int:
        return self.layers[0].f_in

    @property
    def f_out(self) -> int:
        return self.head.f_out if self.head is not None else self.layers[-1].f_out


def _uniform(rng: np.random.Generator, f_in: int, f_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(f_in)
    return rng.uniform(-bound, bound, size=(f_out, f_in))


def init_sinrnet(rng: np.random.Generator, widths: Sequence[int], head_out: int | None = None) -> SinrNetParams:
    """Random SINRnet with feature widths ``widths[0] -> widths[1] -> ...``.

    Every output width must be divisible by 4.  With ``head_out`` a final
    affine map to that many features is appended.
    """
    if len(widths) < 2:
        raise ValueError("need at least one layer")
    layers = []
    for f_in, f_out in zip(widths[:-1], widths[1:]):
        if f_out % N_CATEGORIES:
            raise ValueError(f"layer width {f_out} is not a multiple of {N_CATEGORIES}")
        layers.append(Linear(_uniform(rng, f_in, f_out), np.zeros(f_out)))
    head = None
    if head_out is not None:
        head = Linear(_uniform(rng, widths[-1], head_out), np.zeros(head_out))
    return SinrNetParams(layers, head)


def sinrnet_layer(F, layer: Linear):
    """One category layer: (f_in, ..., K, K) -> (f_out, ..., K, K)."""
    z = ad.affine_relu(layer.weight, F, layer.bias)
    return ad.category_mean(z)


def sinrnet_forward(params: SinrNetParams, F):
    for layer in params.layers:
        F = sinrnet_layer(F, layer)
    if params.head is not None:
        F = ad.affine(params.head.weight, F, params.head.bias)
    return F


def diagonal_readout(F):
    """(1, ..., K, K) cube -> (..., K) vector of its diagonal."""
    F = ad.as_tensor(F)
    if F.shape[0] != 1:
        raise ValueError(f"readout expects feature dim 1, got {F.shape[0]}")
    d = ad.diagonal(F)
    return ad.reshape(d, d.shape[1:])
