"""Wireless channel graph convolution network.

Each layer updates every node from its own state and the elementwise MAX of
MLP1 messages over its in-edges::

    m_ji  = MLP1([x_j, e_ji])
    y_i   = MLP2([static_i, x_i, max_j m_ji])
    x_i' = beta(y_i)

One parameter set is shared by all layers.  ``beta`` is a sigmoid (power
control, state = power fraction) or the unit-ball projection (beamforming,
state = re/im of the normalized beam).

Feature modes:

* ``compact`` (power control, Nt = 1): static_i = [g_ii, w_i] and
  e_ji = [g_jj, w_j, g_ji, g_ij] with g = log(1 + |h|^2 / sigma^2), so a
  message sees the sender's own link and weight.  Widths {5,32,32} and
  {35,16,1}.
* ``log-snr``: static_i = [h_ii, w_i, sigma_i^2] and e_ji = [h_ji, h_ij],
  channels scaled by the noise std and compressed to direction *
  log(1 + |h|^2 / sigma^2).
* ``raw``: the graph features untouched.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import nngrad as ng
from .graph import WirelessGraph, alloc_from_power, build_graph, weighted_sum_rate, beams_from_alloc
from .nngrad import MlpParams, Segments

SIGMOID = "sigmoid"
PROJECTION = "l2-ball-projection"
BETAS = (SIGMOID, PROJECTION)
FEATURE_MODES = ("compact", "log-snr", "raw")
AGGREGATORS = ("max", "sum", "mean")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class WcgcnParams:
    mlp1: MlpParams
    mlp2: MlpParams
    num_tx_antennas: int
    num_layers: int = 3
    beta: str = SIGMOID
    features: str = "log-snr"
    aggregator: str = "max"

    def __post_init__(self):
        if self.beta not in BETAS:
            raise ValueError(f"unknown beta {self.beta!r}")
        if self.beta == SIGMOID and self.num_tx_antennas != 1:
            raise ValueError("sigmoid output is power control and needs Nt = 1")
        if self.features not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.features!r}")
        if self.features == "compact" and self.num_tx_antennas != 1:
            raise ValueError("compact features drop the phase and need Nt = 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        vd = self.state_dim
        ds, de = input_dims(self.features, self.num_tx_antennas)
        w1, w2 = self.mlp1.widths, self.mlp2.widths
        if w1[0] != vd + de:
            raise ng.ShapeError(f"MLP1 input width {w1[0]} != {vd + de}")
        if w2[0] != w1[-1] + ds + vd:
            raise ng.ShapeError(f"MLP2 input width {w2[0]} != {w1[-1] + ds + vd}")
        if w2[-1] != vd:
            raise ng.ShapeError(f"MLP2 output width {w2[-1]} != state width {vd}")
        self.mlp1.validate()
        self.mlp2.validate()

    @property
    def state_dim(self) -> int:
        return 1 if self.beta == SIGMOID else 2 * self.num_tx_antennas

    def arrays(self) -> list:
        return self.mlp1.arrays() + self.mlp2.arrays()

    def with_arrays(self, arrays) -> "WcgcnParams":
        arrays = list(arrays)
        n1 = 2 * len(self.mlp1.weights)
        return replace(self, mlp1=MlpParams.from_arrays(arrays[:n1]),
                       mlp2=MlpParams.from_arrays(arrays[n1:]))

    def meta(self) -> dict:
        return {
            "mlp1": self.mlp1.widths,
            "mlp2": self.mlp2.widths,
            "num_tx_antennas": self.num_tx_antennas,
            "num_layers": self.num_layers,
            "beta": self.beta,
            "features": self.features,
            "aggregator": self.aggregator,
        }


def input_dims(features: str, nt: int) -> tuple[int, int]:
    """(static width, edge width) the model sees in a feature mode."""
    if features == "compact":
        return 2, 4
    return 2 * nt + 2, 4 * nt


def default_features(beta: str) -> str:
    return "compact" if beta == SIGMOID else "log-snr"


def default_widths(nt: int, beta: str, features: str | None = None, mlp1_hidden=None, mlp2_hidden=None):
    vd = 1 if beta == SIGMOID else 2 * nt
    ds, de = input_dims(features or default_features(beta), nt)
    if beta == SIGMOID:
        h1 = list(mlp1_hidden or (32, 32))
        h2 = list(mlp2_hidden or (16,))
    else:
        h1 = list(mlp1_hidden or (64, 64))
        h2 = list(mlp2_hidden or (32,))
    w1 = [vd + de] + h1
    w2 = [h1[-1] + ds + vd] + h2 + [vd]
    return w1, w2


def init_wcgcn(nt: int, rng: np.random.Generator, beta: str | None = None, num_layers: int = 3,
               mlp1=None, mlp2=None, features: str | None = None, aggregator: str = "max") -> WcgcnParams:
    """Glorot-initialised parameters; ``mlp1``/``mlp2`` give full width lists if set."""
    beta = beta or (SIGMOID if nt == 1 else PROJECTION)
    features = features or default_features(beta)
    w1, w2 = default_widths(nt, beta, features)
    w1 = list(mlp1) if mlp1 is not None else w1
    w2 = list(mlp2) if mlp2 is not None else w2
    return WcgcnParams(ng.init_glorot(w1, rng), ng.init_glorot(w2, rng), nt, num_layers,
                       beta, features, aggregator)


# -- inputs ---------------------------------------------------------------------

def _compress(c: np.ndarray) -> np.ndarray:
    """Map the norm r of each complex vector to log(1 + r^2).

    The direction is kept for Nt > 1.  With one antenna the phase never
    enters the objective, so it is dropped and the value is real.
    """
    n2 = np.sum(c.real ** 2 + c.imag ** 2, axis=-1, keepdims=True)
    if c.shape[-1] == 1:
        return np.log1p(n2).astype(complex)
    n = np.sqrt(n2)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n > 0, np.log1p(n2) / n, 0.0)
    return c * scale


def _reim(z):
    return np.concatenate([z.real, z.imag], axis=-1)


@dataclass
class PreparedGraph:
    num_nodes: int
    static: np.ndarray  # (K, 2Nt + 2)
    init: np.ndarray  # (K, state_dim)
    src: np.ndarray
    dst: np.ndarray
    edge: np.ndarray  # (E, 4Nt)


def prepare_graph(params: WcgcnParams, g: WirelessGraph) -> PreparedGraph:
    nt = g.num_tx_antennas
    if nt != params.num_tx_antennas:
        raise ng.ShapeError(f"graph has Nt={nt}, model expects {params.num_tx_antennas}")
    Z = g.node_features
    hkk = Z[:, :nt] + 1j * Z[:, nt:2 * nt]
    if params.features == "raw":
        static, edge = Z, g.edge_features
    elif params.features == "compact":
        s2 = Z[:, -1]
        ef = g.edge_features
        gain = np.log1p(np.abs(hkk[:, 0]) ** 2 / s2)
        static = np.stack([gain, Z[:, 2]], axis=1)
        g_in = np.log1p((ef[:, 0] ** 2 + ef[:, 1] ** 2) / s2[g.dst])  # h_ji at receiver i
        g_out = np.log1p((ef[:, 2] ** 2 + ef[:, 3] ** 2) / s2[g.src])  # h_ij at receiver j
        edge = np.concatenate([static[g.src], g_in[:, None], g_out[:, None]], axis=1)
    else:
        sigma = np.sqrt(Z[:, -1])
        static = np.concatenate([_reim(_compress(hkk / sigma[:, None])), Z[:, 2 * nt:]], axis=1)
        ef = g.edge_features
        h_in = ef[:, :nt] + 1j * ef[:, nt:2 * nt]  # h_ji, seen at receiver i
        h_out = ef[:, 2 * nt:3 * nt] + 1j * ef[:, 3 * nt:]  # h_ij, seen at receiver j
        edge = np.concatenate([_reim(_compress(h_in / sigma[g.dst][:, None])),
                               _reim(_compress(h_out / sigma[g.src][:, None]))], axis=1)
    if params.beta == SIGMOID:
        init = np.full((g.num_nodes, 1), 0.5)
    else:
        nrm = np.linalg.norm(hkk, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            init = _reim(np.where(nrm > 0, hkk / nrm, 0.0))
    return PreparedGraph(g.num_nodes, static, init, g.src.copy(), g.dst.copy(), edge)


@dataclass
class GraphBatch:
    num_nodes: int
    sizes: np.ndarray
    static: np.ndarray
    init: np.ndarray
    src: np.ndarray
    edge: np.ndarray
    seg: Segments


def batch_prepared(items) -> GraphBatch:
    """Disjoint union of prepared graphs; in-edges stay grouped by receiver."""
    items = list(items)
    sizes = np.array([p.num_nodes for p in items])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    src = np.concatenate([p.src + o for p, o in zip(items, offsets)])
    dst = np.concatenate([p.dst + o for p, o in zip(items, offsets)])
    n = int(sizes.sum())
    return GraphBatch(
        n, sizes,
        np.concatenate([p.static for p in items]),
        np.concatenate([p.init for p in items]),
        src.astype(np.int64),
        np.concatenate([p.edge for p in items]),
        Segments(dst, n),
    )


# -- forward --------------------------------------------------------------------

def _aggregate(params, msgs, seg):
    if params.aggregator == "max":
        return ng.segment_max(msgs, seg)
    if params.aggregator == "sum":
        return ng.segment_sum(msgs, seg)
    return ng.segment_mean(msgs, seg)


def _beta(params, y):
    return ng.sigmoid(y) if params.beta == SIGMOID else ng.norm_projection(y)


def _layer(params, batch: GraphBatch, state):
    msgs = ng.mlp_forward(params.mlp1, ng.concat([ng.gather(state, batch.src), batch.edge]))
    agg = _aggregate(params, msgs, batch.seg)
    y = ng.mlp_forward(params.mlp2, ng.concat([batch.static, state, agg]))
    return _beta(params, y)


def _run(params, batch: GraphBatch, num_layers=None, state=None):
    state = batch.init if state is None else state
    for _ in range(params.num_layers if num_layers is None else num_layers):
        state = _layer(params, batch, state)
    return state


def state_to_alloc(params: WcgcnParams, state: np.ndarray, pmax: float) -> np.ndarray:
    if params.beta == SIGMOID:
        return alloc_from_power(pmax * state[:, 0])
    return math.sqrt(pmax) * state


def layer_forward(params: WcgcnParams, g: WirelessGraph, state=None):
    """One shared-weight layer on graph ``g`` from ``state`` (default: the initial state)."""
    batch = batch_prepared([prepare_graph(params, g)])
    state = batch.init if state is None else state
    if ng.value(state).shape != batch.init.shape:
        raise ng.ShapeError(f"state shape {ng.value(state).shape} != {batch.init.shape}")
    return _layer(params, batch, state)


def network_forward(params: WcgcnParams, g: WirelessGraph, pmax: float = 1.0, num_layers=None) -> np.ndarray:
    batch = batch_prepared([prepare_graph(params, g)])
    return state_to_alloc(params, _run(params, batch, num_layers), pmax)


def infer(params: WcgcnParams, g: WirelessGraph, pmax: float = 1.0):
    """Tape-free forward pass; returns (allocation, seconds)."""
    t0 = time.perf_counter()
    alloc = network_forward(params, g, pmax)
    return alloc, time.perf_counter() - t0


def infer_batch(params: WcgcnParams, graphs, pmax: float = 1.0, num_layers=None) -> list:
    """Allocations for many graphs, computed as one disjoint-union pass."""
    prepared = [prepare_graph(params, g) for g in graphs]
    state = _run(params, batch_prepared(prepared), num_layers)
    alloc = state_to_alloc(params, state, pmax)
    bounds = np.cumsum([0] + [p.num_nodes for p in prepared])
    return [alloc[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


# -- unsupervised loss ---------------------------------------------------------------

def link_gains(x, H, beta: str, pmax: float):
    """Received powers ``R[b, j, k] = |h_jk^H v_j|^2`` from stacked node states x (B*K, d)."""
    xv = ng.value(x)
    B, K = H.shape[0], H.shape[1]
    if beta == SIGMOID:
        G = np.sum(H.real ** 2 + H.imag ** 2, axis=-1)
        p = pmax * xv.reshape(B, K)
        R = G * p[:, :, None]
        return ng.custom_op(R, (x,), (lambda g: pmax * np.sum(g * G, axis=2).reshape(xv.shape),))
    nt = H.shape[-1]
    s = math.sqrt(pmax)
    V = s * (xv[:, :nt] + 1j * xv[:, nt:]).reshape(B, K, nt)
    r = np.einsum("bjkn,bjn->bjk", H.conj(), V)
    R = r.real ** 2 + r.imag ** 2

    def vjp(g):
        gv = 2.0 * s * np.einsum("bjk,bjk,bjkn->bjn", g, r, H).reshape(B * K, nt)
        return np.concatenate([gv.real, gv.imag], axis=1)

    return ng.custom_op(R, (x,), (vjp,))


def rate_loss(state, H, weights, noise, beta: str, pmax: float):
    """Negative mean weighted sum rate on the full channels H (B, K, K, Nt)."""
    B, K = H.shape[0], H.shape[1]
    R = link_gains(state, H, beta, pmax)
    signal = ng.diagonal(R)
    interference = ng.total(ng.mul(R, 1.0 - np.eye(K)), axis=1)
    sinr = ng.div(signal, ng.add(interference, noise))
    rate = ng.log(ng.add(sinr, 1.0))
    return ng.mul(ng.total(ng.mul(rate, weights / math.log(2.0))), -1.0 / B)


@dataclass
class LossBatch:
    graphs: GraphBatch
    H: np.ndarray
    weights: np.ndarray
    noise: np.ndarray


def make_loss_batch(params: WcgcnParams, graphs, H, weights, noise) -> LossBatch:
    prepared = [g if isinstance(g, PreparedGraph) else prepare_graph(params, g) for g in graphs]
    H = np.asarray(H)
    if H.ndim != 4 or H.shape[0] != len(prepared):
        raise ng.ShapeError("H must be (B, K, K, Nt) with one entry per graph")
    if any(p.num_nodes != H.shape[1] for p in prepared):
        raise ng.ShapeError("every graph in a loss batch must have K = H.shape[1] nodes")
    return LossBatch(batch_prepared(prepared), H, np.asarray(weights), np.asarray(noise))


def unsup_loss(params: WcgcnParams, batch: LossBatch, pmax: float = 1.0, tape: ng.Tape | None = None):
    """Mean negative weighted sum rate of the network output.

    With a tape, every parameter array is watched (in ``params.arrays()``
    order) and the returned loss is a Var.
    """
    if tape is not None:
        params = params.with_arrays([tape.watch(a) for a in params.arrays()])
    state = _run(params, batch.graphs)
    return rate_loss(state, batch.H, batch.weights, batch.noise, params.beta, pmax)


def loss_and_grads(params: WcgcnParams, batch: LossBatch, pmax: float = 1.0):
    tape = ng.Tape()
    loss = unsup_loss(params, batch, pmax, tape)
    return float(loss.value), ng.backward(tape, loss)


# -- training ----------------------------------------------------------------------

def prepare_dataset(params: WcgcnParams, dataset):
    cfg = dataset.cfg
    return [prepare_graph(params, build_graph(cfg, inst.scenario, inst.channel)) for inst in dataset]


def lr_at(epoch: int, lr: float, schedule=None) -> float:
    """Piecewise-constant learning rate: ``schedule`` is [(first_epoch, lr), ...]."""
    for start, value in sorted(schedule or []):
        if epoch >= start:
            lr = value
    return lr


def train(params: WcgcnParams, dataset, epochs: int = 20, batch_size: int = 64, lr: float = 1e-3,
          rng: np.random.Generator | None = None, prepared=None, callback=None, adam=None,
          lr_schedule=None, start_epoch: int = 0):
    """Mini-batch adam on the unsupervised loss; returns (params, per-epoch mean loss).

    Epochs ``start_epoch .. epochs-1`` are run, so a run can be resumed with
    the same ``rng`` and ``adam`` state.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    pmax = dataset.cfg.pmax
    prepared = prepared if prepared is not None else prepare_dataset(params, dataset)
    state = adam if adam is not None else ng.AdamState(lr=lr)
    arrays = params.arrays()
    curve = []
    n = len(dataset)
    for epoch in range(start_epoch, epochs):
        state.lr = lr_at(epoch, lr, lr_schedule)
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = make_loss_batch(params, [prepared[i] for i in idx], dataset.H[idx],
                                    dataset.weights[idx], dataset.noise[idx])
            loss, grads = loss_and_grads(params, batch, pmax)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(f"non-finite loss/gradient at epoch {epoch}, batch start {start}")
            arrays = ng.adam_step(state, arrays, grads)
            params = params.with_arrays(arrays)
            losses.append(loss)
            sizes.append(len(idx))
        curve.append(float(np.average(losses, weights=sizes)))
        if callback is not None:
            callback(epoch, curve[-1], params)
    return params, curve


def evaluate(params: WcgcnParams, dataset, prepared=None, num_layers=None) -> np.ndarray:
    """Per-instance weighted sum rate of the network on ``dataset`` (full CSI)."""
    prepared = prepared if prepared is not None else prepare_dataset(params, dataset)
    state = _run(params, batch_prepared(prepared), num_layers)
    alloc = state_to_alloc(params, state, dataset.cfg.pmax)
    K = dataset.cfg.num_pairs
    V = beams_from_alloc(alloc).reshape(len(dataset), K, -1)
    return weighted_sum_rate(V, dataset.H, dataset.weights, dataset.noise)
