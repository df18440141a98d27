"""Synchronous multiset-broadcast distributed local algorithms.

Every round each node broadcasts ``h1(state)`` along its out-edges, each
edge turns the payload into a message with ``h2``, each node folds its
in-message multiset with ``g1`` and updates with ``g2``.  All sends of a
round happen before any update.

:func:`wmmse_mbdla_spec` writes WMMSE for the K-pair interference channel in
this form: odd rounds refresh (U, W), even rounds refresh V, so 2T rounds
reproduce T WMMSE iterations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import WirelessGraph, graph_from_edges, weighted_sum_rate
from .scenario import ChannelRealization
from .wmmse import bisect_mu_batched, random_init, wmmse_batch


@dataclass(frozen=True)
class MbDlaSpec:
    rounds: int
    h1: Callable  # (t, state) -> payload
    h2: Callable  # (t, payload, edge_feature) -> message
    g1: Callable  # (t, list of messages) -> aggregate
    g2: Callable  # (t, state, aggregate) -> state


def multiset_sum(messages, zero):
    """Sum that does not depend on message order: sort canonically, then add."""
    if not messages:
        return zero
    stack = np.stack([np.asarray(m) for m in messages])
    flat = stack.reshape(len(messages), -1)
    flat = np.concatenate([flat.real, flat.imag], axis=1) if np.iscomplexobj(flat) else flat
    order = np.lexsort(flat.T[::-1])
    out = zero
    for k in order:
        out = out + stack[k]
    return out


def run_mbdla(spec: MbDlaSpec, g: WirelessGraph, init_states, trace: list | None = None):
    if spec.rounds < 1:
        raise ValueError("rounds must be >= 1")
    states = [np.asarray(s) for s in init_states]
    if len(states) != g.num_nodes:
        raise ValueError("one initial state per node is required")
    width = states[0].shape
    in_edges = [[] for _ in range(g.num_nodes)]
    for e, (j, i) in enumerate(g.edge_index):
        in_edges[i].append((int(j), g.edge_features[e]))
    for t in range(1, spec.rounds + 1):
        payloads = [spec.h1(t, s) for s in states]
        new = []
        for i in range(g.num_nodes):
            msgs = [spec.h2(t, payloads[j], e) for j, e in in_edges[i]]
            x = spec.g2(t, states[i], spec.g1(t, msgs))
            if np.shape(x) != width:
                raise ValueError(f"round {t}: g2 changed state width {width} -> {np.shape(x)}")
            new.append(x)
        states = new
        if trace is not None:
            trace.append([s.copy() for s in states])
    return np.stack(states)


# -- WMMSE as an MB-DLA --------------------------------------------------------------

def _layout(nt):
    # state: [U, W, w, sigma2, V (Nt), h_kk (Nt)] as one complex vector
    return {"U": 0, "W": 1, "w": 2, "s2": 3, "V": slice(4, 4 + nt), "h": slice(4 + nt, 4 + 2 * nt)}


def wmmse_initial_states(g: WirelessGraph, V0) -> np.ndarray:
    nt = g.num_tx_antennas
    Z = g.node_features
    V0 = np.asarray(V0, dtype=complex).reshape(g.num_nodes, nt)
    hkk = Z[:, :nt] + 1j * Z[:, nt:2 * nt]
    states = np.zeros((g.num_nodes, 4 + 2 * nt), dtype=complex)
    states[:, 2] = Z[:, 2 * nt]
    states[:, 3] = Z[:, 2 * nt + 1]
    states[:, 4:4 + nt] = V0
    states[:, 4 + nt:] = hkk
    return states


def states_to_beams(states: np.ndarray, nt: int) -> np.ndarray:
    return states[:, 4:4 + nt].copy()


def wmmse_mbdla_spec(num_iters: int, nt: int, pmax: float = 1.0) -> MbDlaSpec:
    """2 * num_iters rounds: odd rounds update (U, W), even rounds update V."""
    L = _layout(nt)

    def split(e):
        h_in = e[:nt] + 1j * e[nt:2 * nt]  # h_ji: sender j -> this receiver i
        h_out = e[2 * nt:3 * nt] + 1j * e[3 * nt:]  # h_ij: this transmitter i -> receiver j
        return h_in, h_out

    def h1(t, x):
        return x

    def h2(t, y, e):
        h_in, h_out = split(e)
        if t % 2 == 1:
            r = np.vdot(h_in, y[L["V"]])
            return np.array(r.real ** 2 + r.imag ** 2)
        U, W, w = y[L["U"]], y[L["W"]].real, y[L["w"]].real
        return (w * abs(U) ** 2 * W) * np.outer(h_out, h_out.conj())

    def g1(t, msgs):
        zero = np.array(0.0) if t % 2 == 1 else np.zeros((nt, nt), dtype=complex)
        return multiset_sum(msgs, zero)

    def g2(t, x, M):
        x = x.copy()
        h, V = x[L["h"]], x[L["V"]]
        s2, w = x[L["s2"]].real, x[L["w"]].real
        if t % 2 == 1:
            d = np.vdot(h, V)
            interference = float(M)
            total = interference + (d.real ** 2 + d.imag ** 2) + s2
            x[L["U"]] = d / total
            x[L["W"]] = total / (interference + s2)
        else:
            U, W = x[L["U"]], x[L["W"]].real
            Mk = M + (w * abs(U) ** 2 * W) * np.outer(h, h.conj())
            b = (w * U * W) * h
            _, v = bisect_mu_batched(Mk[None], b[None], pmax)
            x[L["V"]] = v[0]
        return x

    return MbDlaSpec(2 * num_iters, h1, h2, g1, g2)


def run_wmmse_mbdla(g: WirelessGraph, V0, num_iters: int, pmax: float = 1.0, trace=None) -> np.ndarray:
    """Final beams (K, Nt) of WMMSE executed as message passing on ``g``."""
    spec = wmmse_mbdla_spec(num_iters, g.num_tx_antennas, pmax)
    states = run_mbdla(spec, g, wmmse_initial_states(g, V0), trace)
    return states_to_beams(states, g.num_tx_antennas)


def local_csi_wmmse(g: WirelessGraph, V0, num_iters: int, pmax: float = 1.0) -> np.ndarray:
    """WMMSE that only exchanges messages along the (possibly thresholded) edges of g."""
    return run_wmmse_mbdla(g, V0, num_iters, pmax)


def complete_graph(chan: ChannelRealization) -> WirelessGraph:
    K = chan.num_pairs
    src, dst = np.nonzero(~np.eye(K, dtype=bool))
    return graph_from_edges(chan, src, dst)


def equivalence_report(channels, iters_list=(1, 5, 20), pmax: float = 1.0, rng=None) -> list[dict]:
    """Max |dV| and |d objective| between WMMSE and its message-passing form."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for n, chan in enumerate(channels):
        g = complete_graph(chan)
        V0 = random_init(rng, (chan.num_pairs, chan.num_tx_antennas), pmax)
        for T in iters_list:
            V_ref, traj = wmmse_batch(chan.H, chan.weights, chan.noise, pmax, V0, T)
            V_mp = run_wmmse_mbdla(g, V0, T, pmax)
            obj = weighted_sum_rate(V_mp, chan.H, chan.weights, chan.noise)
            rows.append({
                "instance": n,
                "K": chan.num_pairs,
                "Nt": chan.num_tx_antennas,
                "T": T,
                "max_abs_dV": float(np.max(np.abs(V_ref - V_mp))),
                "abs_dobjective": float(abs(traj[-1] - obj)),
            })
    return rows


def trace_to_json(trace) -> str:
    return json.dumps([[[[z.real, z.imag] for z in s] for s in states] for states in trace])
