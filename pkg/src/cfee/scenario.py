"""Cell-free network drops, Rayleigh/path-loss channels and MRT effective gains.

Gains are stored AP-major: ``gains[l, k, j]`` is the power that AP ``l``'s
MRT beam towards UE ``j`` delivers at UE ``k``.  ``gains[l, k, k]`` is the
useful-signal gain ``||h_{l,k}||^2``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CFEE"
FORMAT_VERSION = 1


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class SystemParams:
    """Network and power-model constants.

    ``serve_threshold`` is in dB (``None`` = every AP has CSI of every UE).
    Field order is the on-disk order of the dataset header.
    """

    n_aps: int = 15
    n_ues: int = 15
    n_antennas: int = 5
    area_side: float = 100.0
    ap_height: float = 10.0
    pathloss_exp: float = 3.67
    pathloss_const: float = -30.5
    shadow_std: float = 4.0
    noise_power: float = dbm_to_watt(-86.0)
    amp_inefficiency: float = 1.0
    static_power: float = 4.0
    serve_threshold: float | None = None
    bandwidth: float = 10e6

    def __post_init__(self):
        for name in ("n_aps", "n_ues", "n_antennas"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        for name in ("area_side", "noise_power", "amp_inefficiency", "static_power", "bandwidth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if self.shadow_std < 0:
            raise ValueError("shadow_std must be >= 0")
        if self.ap_height < 0:
            raise ValueError("ap_height must be >= 0")

    def as_floats(self) -> list[float]:
        return [math.nan if v is None else float(v) for v in astuple(self)]

    @classmethod
    def from_floats(cls, values: Sequence[float]) -> "SystemParams":
        kw = {}
        for f, v in zip(fields(cls), values):
            if f.name == "serve_threshold":
                kw[f.name] = None if math.isnan(v) else v
            elif f.name in ("n_aps", "n_ues", "n_antennas"):
                kw[f.name] = int(v)
            else:
                kw[f.name] = v
        return cls(**kw)


@dataclass(frozen=True)
class Topology:
    ap_positions: np.ndarray  # (L, 3)
    ue_positions: np.ndarray  # (K, 2), height 0


@dataclass(frozen=True)
class ChannelSample:
    gains: np.ndarray  # (L, K, K) effective MRT gains
    topology: Topology
    raw_channels: np.ndarray | None = field(default=None, repr=False)  # (L, N, K) complex

    @property
    def n_aps(self) -> int:
        return self.gains.shape[0]

    @property
    def n_ues(self) -> int:
        return self.gains.shape[1]


@dataclass(frozen=True)
class Dataset:
    params: SystemParams
    samples: list[ChannelSample]
    seed: int = 0

    def __len__(self):
        return len(self.samples)

    def gains(self, idx=None) -> np.ndarray:
        """Stacked gains, shape (n, L, K, K)."""
        samples = self.samples if idx is None else [self.samples[i] for i in idx]
        if not samples:
            L, K = self.params.n_aps, self.params.n_ues
            return np.zeros((0, L, K, K))
        return np.stack([s.gains for s in samples])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.params, [self.samples[i] for i in idx], self.seed)


# ---------------------------------------------------------------------------
# geometry and channels


def ap_grid(n_aps: int, area_side: float, ap_height: float) -> np.ndarray:
    """Row-major cell centres of a ceil(sqrt(L)) square grid; first L cells."""
    g = math.ceil(math.sqrt(n_aps))
    cell = area_side / g
    idx = np.arange(n_aps)
    x = (idx % g + 0.5) * cell
    y = (idx // g + 0.5) * cell
    return np.column_stack([x, y, np.full(n_aps, float(ap_height))])


def generate_topology(params: SystemParams, rng: np.random.Generator) -> Topology:
    aps = ap_grid(params.n_aps, params.area_side, params.ap_height)
    ues = rng.uniform(0.0, params.area_side, size=(params.n_ues, 2))
    return Topology(aps, ues)


def distances(topology: Topology) -> np.ndarray:
    """3-D AP-UE distances, shape (L, K)."""
    ue3 = np.column_stack([topology.ue_positions, np.zeros(len(topology.ue_positions))])
    diff = topology.ap_positions[:, None, :] - ue3[None, :, :]
    return np.linalg.norm(diff, axis=-1)


def large_scale_gain(distance, shadow_db=0.0, pathloss_exp: float = 3.67, pathloss_const: float = -30.5):
    """Linear gain of ``pathloss_const - 10*alpha*log10(d) + shadow``."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    db = pathloss_const - 10.0 * pathloss_exp * np.log10(d) + shadow_db
    out = 10.0 ** (db / 10.0)
    return float(out) if out.ndim == 0 else out


def small_scale_channel(rng: np.random.Generator, n_antennas: int, large_gain) -> np.ndarray:
    """CN(0, large_gain) entries; broadcasts over a trailing array of gains.

    For scalar ``large_gain`` returns an N-vector, for an array of shape S
    returns shape (N,) + S.
    """
    g = np.asarray(large_gain, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("large_gain must be >= 0")
    shape = (n_antennas,) + g.shape
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return z * np.sqrt(g / 2.0)


def effective_gains(raw: np.ndarray) -> np.ndarray:
    """MRT effective gains from raw channels.

    ``raw`` has shape (L, N, K) (column k is the channel of UE k at AP l).
    Returns (L, K, K) with ``out[l, k, j] = |h_k^H h_j|^2 / ||h_j||^2`` and
    zero where ``h_j`` vanishes.
    """
    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = raw[None]
    cross = np.abs(np.einsum("lnk,lnj->lkj", raw.conj(), raw)) ** 2
    norms2 = np.sum(np.abs(raw) ** 2, axis=1)  # (L, K)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(norms2[:, None, :] > 0, cross / norms2[:, None, :], 0.0)
    # the diagonal is exactly ||h_k||^2; avoid round-off from the ratio
    k = np.arange(raw.shape[2])
    out[:, k, k] = norms2
    return out


def serve_mask(gains: np.ndarray, threshold_db: float | None) -> np.ndarray:
    """Boolean (L, K) mask of links whose useful gain reaches the threshold."""
    diag = np.diagonal(gains, axis1=-2, axis2=-1)
    if threshold_db is None:
        return np.ones(diag.shape, dtype=bool)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(diag) >= threshold_db


def observed_gains(gains: np.ndarray, threshold_db: float | None) -> np.ndarray:
    """Gains as seen by each AP: rows/columns of unserved UEs zeroed."""
    if threshold_db is None:
        return gains
    m = serve_mask(gains, threshold_db).astype(np.float64)
    return gains * m[..., :, None] * m[..., None, :]


def generate_sample(params: SystemParams, rng: np.random.Generator, keep_raw: bool = False) -> ChannelSample:
    topo = generate_topology(params, rng)
    d = distances(topo)
    shadow = rng.normal(0.0, params.shadow_std, size=d.shape) if params.shadow_std > 0 else 0.0
    beta = large_scale_gain(d, shadow, params.pathloss_exp, params.pathloss_const)
    # path loss is the gain of the whole N-antenna link: E||h_{l,k}||^2 = beta
    raw = small_scale_channel(rng, params.n_antennas, beta / params.n_antennas)  # (N, L, K)
    raw = np.transpose(raw, (1, 0, 2))
    return ChannelSample(effective_gains(raw), topo, raw if keep_raw else None)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_dataset(params: SystemParams, count: int, seed: int, keep_raw: bool = False) -> Dataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = [generate_sample(params, sample_rng(seed, i), keep_raw) for i in range(count)]
    return Dataset(params, samples, int(seed))


# ---------------------------------------------------------------------------
# binary format


def save_dataset(dataset: Dataset, path) -> None:
    p = dataset.params
    L, K, N = p.n_aps, p.n_ues, p.n_antennas
    parts = [MAGIC, struct.pack("<5I", FORMAT_VERSION, L, K, N, len(dataset))]
    parts.append(np.asarray(p.as_floats(), dtype="<f8").tobytes())
    for s in dataset.samples:
        if s.gains.shape != (L, K, K):
            raise ValueError(f"sample gains shape {s.gains.shape} != {(L, K, K)}")
        parts.append(np.ascontiguousarray(s.topology.ap_positions, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.topology.ue_positions, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.gains, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path, seed: int = 0) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a CFEE dataset")
    version, L, K, N, count = struct.unpack_from("<5I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 24
    n_fields = len(fields(SystemParams))
    values = np.frombuffer(buf, dtype="<f8", count=n_fields, offset=off)
    off += 8 * n_fields
    params = SystemParams.from_floats(values.tolist())
    if (params.n_aps, params.n_ues, params.n_antennas) != (L, K, N):
        raise ValueError(f"{path}: header dimensions disagree with stored parameters")
    per = L * 3 + K * 2 + L * K * K
    expected = off + 8 * per * count
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    block = np.frombuffer(buf, dtype="<f8", count=per * count, offset=off).reshape(count, per)
    samples = []
    for row in block:
        aps = row[: L * 3].reshape(L, 3).copy()
        ues = row[L * 3 : L * 3 + K * 2].reshape(K, 2).copy()
        gains = row[L * 3 + K * 2 :].reshape(L, K, K).copy()
        samples.append(ChannelSample(gains, Topology(aps, ues)))
    return Dataset(params, samples, seed)


def gain_statistics(dataset: Dataset) -> tuple[float, float]:
    g = dataset.gains()
    return float(g.mean()), float(g.std())
