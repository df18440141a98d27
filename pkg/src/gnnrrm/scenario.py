"""Problem-instance generation for the K-pair interference channel.

Random numbers come from numpy's PCG64 bit generator.  Every sample owns its
own stream, derived as ``SeedSequence(entropy=seed, spawn_key=(stream, i))``,
so a dataset is reproducible from ``(config, seed)`` alone and any sample can
be regenerated in isolation.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

RAYLEIGH = "rayleigh-iid"
PATHLOSS = "pathloss-rayleigh"
CHANNEL_MODELS = (RAYLEIGH, PATHLOSS)

MAX_PLACEMENT_ATTEMPTS = 1000


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SystemConfig:
    num_pairs: int
    num_tx_antennas: int = 1
    area_side: float = 1000.0
    dmin: float = 2.0
    dmax: float = 65.0
    pmax: float = 1.0
    # linear noise power; None derives it from snr_db (rayleigh) or the dBm budget (pathloss)
    noise_power: float | None = None
    snr_db: float = 0.0
    channel_model: str = RAYLEIGH
    edge_threshold: float = math.inf
    rng_seed: int = 0
    weighted: bool = False
    # path-loss constants
    pathloss_const_db: float = 148.1
    pathloss_slope_db: float = 37.6
    shadowing_db: float = 8.0
    noise_dbm: float = -100.0
    tx_power_dbm: float = 30.0
    ref_distance: float = 1.0

    def __post_init__(self):
        if self.num_pairs < 1:
            raise InvalidConfigError(f"num_pairs must be >= 1, got {self.num_pairs}")
        if self.num_tx_antennas < 1:
            raise InvalidConfigError(f"num_tx_antennas must be >= 1, got {self.num_tx_antennas}")
        if not 0 <= self.dmin <= self.dmax <= self.area_side:
            raise InvalidConfigError(
                f"need 0 <= dmin <= dmax <= area_side, got {self.dmin}, {self.dmax}, {self.area_side}")
        if self.pmax <= 0:
            raise InvalidConfigError("pmax must be positive")
        if self.noise_power is not None and self.noise_power <= 0:
            raise InvalidConfigError("noise_power must be positive")
        if self.channel_model not in CHANNEL_MODELS:
            raise InvalidConfigError(f"unknown channel model {self.channel_model!r}")
        if not self.edge_threshold > 0:
            raise InvalidConfigError("edge_threshold must be > 0 (use inf for a complete graph)")
        if self.ref_distance <= 0:
            raise InvalidConfigError("ref_distance must be positive")

    @property
    def sigma2(self) -> float:
        if self.noise_power is not None:
            return float(self.noise_power)
        if self.channel_model == RAYLEIGH:
            return self.pmax * 10.0 ** (-self.snr_db / 10.0)
        return self.pmax * 10.0 ** ((self.noise_dbm - self.tx_power_dbm) / 10.0)

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if math.isinf(d["edge_threshold"]):
            d["edge_threshold"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        if isinstance(d.get("edge_threshold"), str):
            d["edge_threshold"] = float(d["edge_threshold"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown SystemConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Scenario:
    tx_positions: np.ndarray  # (K, 2) meters
    rx_positions: np.ndarray  # (K, 2) meters

    @property
    def num_pairs(self) -> int:
        return self.tx_positions.shape[0]

    def pair_distances(self) -> np.ndarray:
        return np.linalg.norm(self.tx_positions - self.rx_positions, axis=1)

    def cross_distances(self) -> np.ndarray:
        """``d[j, k]`` is the distance from transmitter j to receiver k."""
        diff = self.tx_positions[:, None, :] - self.rx_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)


@dataclass(frozen=True)
class ChannelRealization:
    H: np.ndarray  # (K, K, Nt) complex; H[j, k] is the channel from transmitter j to receiver k
    weights: np.ndarray  # (K,)
    noise: np.ndarray  # (K,) sigma^2 per receiver

    @property
    def num_pairs(self) -> int:
        return self.H.shape[0]

    @property
    def num_tx_antennas(self) -> int:
        return self.H.shape[2]


@dataclass(frozen=True)
class Instance:
    scenario: Scenario
    channel: ChannelRealization


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent PCG64 stream for sample ``index`` of split ``stream``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def generate_layout(cfg: SystemConfig, rng: np.random.Generator) -> Scenario:
    K, A = cfg.num_pairs, cfg.area_side
    if cfg.dmin > A * math.sqrt(2.0):
        raise InvalidConfigError("dmin exceeds the square diagonal; no receiver can be placed")
    tx = rng.uniform(0.0, A, size=(K, 2))
    rx = np.empty_like(tx)
    pending = np.arange(K)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        n = pending.size
        # area-uniform radius on the annulus
        u = rng.uniform(size=n)
        r = np.sqrt(u * (cfg.dmax ** 2 - cfg.dmin ** 2) + cfg.dmin ** 2)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        cand = tx[pending] + r[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        inside = np.all((cand >= 0.0) & (cand <= A), axis=1)
        rx[pending[inside]] = cand[inside]
        pending = pending[~inside]
        if pending.size == 0:
            return Scenario(tx, rx)
    raise InvalidConfigError(
        f"could not place {pending.size} receivers inside the area after "
        f"{MAX_PLACEMENT_ATTEMPTS} attempts; annulus [{cfg.dmin}, {cfg.dmax}] is infeasible")


def pathloss_db(distance, cfg: SystemConfig):
    """Large-scale gain in dB (negative), without shadowing."""
    d = np.maximum(np.asarray(distance, dtype=float), cfg.ref_distance)
    return -(cfg.pathloss_const_db + cfg.pathloss_slope_db * np.log10(d / 1000.0))


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_channels(cfg: SystemConfig, scen: Scenario, rng: np.random.Generator) -> ChannelRealization:
    K, Nt = cfg.num_pairs, cfg.num_tx_antennas
    if scen.num_pairs != K:
        raise InvalidConfigError(f"scenario has {scen.num_pairs} pairs, config says {K}")
    fading = _complex_normal(rng, (K, K, Nt))
    if cfg.channel_model == RAYLEIGH:
        H = fading
    else:
        gain_db = pathloss_db(scen.cross_distances(), cfg)
        gain_db = gain_db + cfg.shadowing_db * rng.standard_normal((K, K))
        H = np.sqrt(10.0 ** (gain_db / 10.0))[:, :, None] * fading
    weights = rng.uniform(0.0, 1.0, size=K) if cfg.weighted else np.ones(K)
    noise = np.full(K, cfg.sigma2)
    return ChannelRealization(H=H, weights=weights, noise=noise)


def sample_instance(cfg: SystemConfig, rng: np.random.Generator) -> Instance:
    scen = generate_layout(cfg, rng)
    return Instance(scen, sample_channels(cfg, scen, rng))


@dataclass
class Dataset:
    """A stack of i.i.d. instances sharing one config (fixed K and Nt)."""

    cfg: SystemConfig
    tx: np.ndarray  # (N, K, 2)
    rx: np.ndarray  # (N, K, 2)
    H: np.ndarray  # (N, K, K, Nt) complex
    weights: np.ndarray  # (N, K)
    noise: np.ndarray  # (N, K)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.H.shape[0]

    def __getitem__(self, i) -> Instance:
        if isinstance(i, slice):
            raise TypeError("use subset() for slicing")
        return Instance(Scenario(self.tx[i], self.rx[i]),
                        ChannelRealization(self.H[i], self.weights[i], self.noise[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.cfg, self.tx[idx], self.rx[idx], self.H[idx],
                       self.weights[idx], self.noise[idx], dict(self.meta))


def make_dataset(cfg: SystemConfig, n_samples: int, seed: int | None = None,
                 stream: int = 0) -> Dataset:
    """Draw ``n_samples`` instances; ``stream`` separates train/test splits."""
    if n_samples < 1:
        raise InvalidConfigError("n_samples must be >= 1")
    seed = cfg.rng_seed if seed is None else seed
    K, Nt = cfg.num_pairs, cfg.num_tx_antennas
    tx = np.empty((n_samples, K, 2))
    rx = np.empty((n_samples, K, 2))
    H = np.empty((n_samples, K, K, Nt), dtype=complex)
    w = np.empty((n_samples, K))
    noise = np.empty((n_samples, K))
    for i in range(n_samples):
        inst = sample_instance(cfg, sample_rng(seed, i, stream))
        tx[i], rx[i] = inst.scenario.tx_positions, inst.scenario.rx_positions
        H[i], w[i], noise[i] = inst.channel.H, inst.channel.weights, inst.channel.noise
    return Dataset(cfg, tx, rx, H, w, noise, {"seed": int(seed), "stream": int(stream)})
