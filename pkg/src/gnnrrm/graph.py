"""Wireless channel graphs, allocations, and the weighted-sum-rate objective.

Layouts (Nt transmit antennas):

* node row k:        ``[re h_kk (Nt), im h_kk (Nt), w_k, sigma2_k]``
* edge (j, i):       ``[re h_ji (Nt), im h_ji (Nt), re h_ij (Nt), im h_ij (Nt)]``
* allocation row k:  ``[re v_k (Nt), im v_k (Nt)]``

Edges are directed transmitter-to-receiver interference links and are kept
sorted by ``(dst, src)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .scenario import ChannelRealization, Scenario, SystemConfig

FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class WirelessGraph:
    num_nodes: int
    num_tx_antennas: int
    node_features: np.ndarray  # (K, 2Nt + 2)
    edge_index: np.ndarray  # (E, 2) int rows [src j, dst i]
    edge_features: np.ndarray  # (E, 4Nt)

    def __post_init__(self):
        ei = self.edge_index
        if ei.ndim != 2 or ei.shape[1] != 2:
            raise ValueError("edge_index must be (E, 2)")
        if ei.size and np.any(ei[:, 0] == ei[:, 1]):
            raise ValueError("self-edges are not allowed")
        if self.edge_features.shape != (ei.shape[0], 4 * self.num_tx_antennas):
            raise ValueError("edge_features shape does not match edge_index / Nt")
        if self.node_features.shape != (self.num_nodes, 2 * self.num_tx_antennas + 2):
            raise ValueError("node_features shape does not match num_nodes / Nt")

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[0]

    @property
    def src(self) -> np.ndarray:
        return self.edge_index[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edge_index[:, 1]

    def edge_dict(self) -> dict:
        return {(int(j), int(i)): self.edge_features[e] for e, (j, i) in enumerate(self.edge_index)}

    def equals(self, other: "WirelessGraph") -> bool:
        return (self.num_nodes == other.num_nodes
                and self.num_tx_antennas == other.num_tx_antennas
                and np.array_equal(self.node_features, other.node_features)
                and np.array_equal(self.edge_index, other.edge_index)
                and np.array_equal(self.edge_features, other.edge_features))

    def to_json(self) -> str:
        return json.dumps({
            "num_nodes": self.num_nodes,
            "num_tx_antennas": self.num_tx_antennas,
            "node_features": self.node_features.tolist(),
            "edges": self.edge_index.tolist(),
            "edge_features": self.edge_features.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "WirelessGraph":
        d = json.loads(text)
        nt = d["num_tx_antennas"]
        return cls(d["num_nodes"], nt, np.asarray(d["node_features"], dtype=float),
                   np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
                   np.asarray(d["edge_features"], dtype=float).reshape(-1, 4 * nt))


def _reim(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=-1)


def _sorted_edges(edge_index, edge_features):
    order = np.lexsort((edge_index[:, 0], edge_index[:, 1]))
    return edge_index[order], edge_features[order]


def node_features(chan: ChannelRealization) -> np.ndarray:
    K = chan.num_pairs
    hkk = chan.H[np.arange(K), np.arange(K)]
    return np.concatenate([_reim(hkk), chan.weights[:, None], chan.noise[:, None]], axis=1)


def edge_features_for(chan: ChannelRealization, src, dst) -> np.ndarray:
    return np.concatenate([_reim(chan.H[src, dst]), _reim(chan.H[dst, src])], axis=1)


def graph_from_edges(chan: ChannelRealization, src, dst) -> WirelessGraph:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    ei = np.stack([src, dst], axis=1).reshape(-1, 2)
    ef = edge_features_for(chan, src, dst).reshape(-1, 4 * chan.num_tx_antennas)
    ei, ef = _sorted_edges(ei, ef)
    return WirelessGraph(chan.num_pairs, chan.num_tx_antennas, node_features(chan), ei, ef)


def edge_mask(cfg: SystemConfig, scen: Scenario) -> np.ndarray:
    """Boolean (K, K) mask, True at (j, i) when j interferes with i within the threshold."""
    K = scen.num_pairs
    if math.isinf(cfg.edge_threshold):
        mask = np.ones((K, K), dtype=bool)
    else:
        mask = scen.cross_distances() <= cfg.edge_threshold
    np.fill_diagonal(mask, False)
    return mask


def build_graph(cfg: SystemConfig, scen: Scenario, chan: ChannelRealization) -> WirelessGraph:
    src, dst = np.nonzero(edge_mask(cfg, scen))
    return graph_from_edges(chan, src, dst)


# -- permutations ---------------------------------------------------------

def check_permutation(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of [{n}]: {perm!r}")
    return perm.astype(np.int64)


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def permute(g: WirelessGraph, perm) -> WirelessGraph:
    """Relabel node i as ``perm[i]``: rows of Z move, edge keys are mapped."""
    perm = check_permutation(perm, g.num_nodes)
    Z = np.empty_like(g.node_features)
    Z[perm] = g.node_features
    ei, ef = _sorted_edges(perm[g.edge_index], g.edge_features)
    return WirelessGraph(g.num_nodes, g.num_tx_antennas, Z, ei, ef)


def permute_alloc(alloc: np.ndarray, perm) -> np.ndarray:
    perm = check_permutation(perm, alloc.shape[0])
    out = np.empty_like(alloc)
    out[perm] = alloc
    return out


def permute_channel(chan: ChannelRealization, perm) -> ChannelRealization:
    perm = check_permutation(perm, chan.num_pairs)
    H = np.empty_like(chan.H)
    H[perm[:, None], perm[None, :]] = chan.H
    w = np.empty_like(chan.weights)
    w[perm] = chan.weights
    noise = np.empty_like(chan.noise)
    noise[perm] = chan.noise
    return ChannelRealization(H, w, noise)


def permute_scenario(scen: Scenario, perm) -> Scenario:
    perm = check_permutation(perm, scen.num_pairs)
    tx, rx = np.empty_like(scen.tx_positions), np.empty_like(scen.rx_positions)
    tx[perm], rx[perm] = scen.tx_positions, scen.rx_positions
    return Scenario(tx, rx)


# -- allocations and the objective ----------------------------------------

def beams_from_alloc(alloc: np.ndarray) -> np.ndarray:
    nt = alloc.shape[-1] // 2
    return alloc[..., :nt] + 1j * alloc[..., nt:]


def alloc_from_beams(V: np.ndarray) -> np.ndarray:
    return _reim(np.asarray(V, dtype=complex))


def alloc_from_power(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.stack([np.sqrt(p), np.zeros_like(p)], axis=-1)


def received_power(V: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``R[..., j, k] = |h_jk^H v_j|^2`` for beams V (..., K, Nt) and channels H (..., K, K, Nt)."""
    r = np.einsum("...jkn,...jn->...jk", H.conj(), V)
    return r.real ** 2 + r.imag ** 2


def sinr_from_beams(V, H, noise):
    R = received_power(V, H)
    K = R.shape[-1]
    signal = np.diagonal(R, axis1=-2, axis2=-1)
    interference = np.sum(R * (1.0 - np.eye(K)), axis=-2)
    return signal / (interference + noise)


def weighted_sum_rate(V, H, weights, noise):
    """Objective for beams V; works on single instances or stacked batches."""
    sinr = sinr_from_beams(V, H, noise)
    return np.sum(weights * np.log2(1.0 + sinr), axis=-1)


def sinr_and_rates(alloc: np.ndarray, chan: ChannelRealization, graph: WirelessGraph | None = None):
    """Per-node SINR and the weighted sum rate, always on the full channel.

    ``graph`` is only used to validate dimensions; thresholded graphs do not
    change the evaluation.
    """
    K, nt = chan.num_pairs, chan.num_tx_antennas
    if alloc.shape != (K, 2 * nt):
        raise ValueError(f"allocation shape {alloc.shape} does not match (K={K}, 2Nt={2 * nt})")
    if graph is not None and (graph.num_nodes != K or graph.num_tx_antennas != nt):
        raise ValueError("graph and channel disagree on K or Nt")
    V = beams_from_alloc(alloc)
    sinr = sinr_from_beams(V, chan.H, chan.noise)
    return sinr, float(np.sum(chan.weights * np.log2(1.0 + sinr)))


def objective(alloc: np.ndarray, chan: ChannelRealization) -> float:
    return sinr_and_rates(alloc, chan)[1]


def check_feasible(alloc: np.ndarray, pmax: float, tol: float = FEASIBILITY_TOL) -> bool:
    return bool(np.all(np.sum(alloc ** 2, axis=-1) <= pmax + tol))
