"""A small reverse-mode gradient engine over numpy arrays, MLPs and adam.

Values are float64 numpy arrays.  An op records itself on a tape only when at
least one operand is a :class:`Var`; with plain arrays every function below
is an ordinary numpy evaluation, so inference and training share one code
path.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass
class _Record:
    out: int
    inputs: tuple
    vjps: tuple


class Tape:
    """Records ops in execution (hence topological) order."""

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: list[Var] = []
        self._count = 0

    def _new(self, value) -> Var:
        v = Var(value, self, self._count)
        self._count += 1
        return v

    def watch(self, value) -> Var:
        v = self._new(np.array(value, dtype=float))
        self.leaves.append(v)
        return v

    def record(self, value, inputs, vjps) -> Var:
        out = self._new(value)
        self.records.append(_Record(out.index, tuple(inputs), tuple(vjps)))
        return out


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def custom_op(out_value, inputs, vjps):
    """Record ``out_value`` with one vector-Jacobian function per input.

    Inputs that are not Vars are constants and their vjp is never called.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return out_value
    pairs = [(x, f) for x, f in zip(inputs, vjps) if isinstance(x, Var)]
    return tape.record(out_value, [x for x, _ in pairs], [f for _, f in pairs])


def backward(tape: Tape, loss: Var) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every watched leaf, in watch order."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a Var recorded on this tape")
    if np.size(loss.value) != 1:
        raise ShapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out, None)
        if g is None:
            continue
        for x, vjp in zip(rec.inputs, rec.vjps):
            gx = vjp(g)
            if x.index in grads:
                grads[x.index] = grads[x.index] + gx
            else:
                grads[x.index] = gx
    return [grads.get(leaf.index, np.zeros_like(leaf.value)) for leaf in tape.leaves]


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitives ---------------------------------------------------------------

def _gemm(a, b):
    # gemv rounds differently from gemm; keep every row on the gemm path so a
    # row's result does not depend on how many rows it is batched with
    if a.ndim == 2 and a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


def matmul(x, W):
    xv, Wv = value(x), value(W)
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise ShapeError(f"matmul shapes {xv.shape} @ {Wv.shape}")
    return custom_op(_gemm(xv, Wv), (x, W),
                     (lambda g: _gemm(g, Wv.T), lambda g: xv.T @ g))


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return custom_op(out, (a, b), (lambda g: _unbroadcast(g, np.shape(av)),
                                   lambda g: _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = value(a), value(b)
    return custom_op(av - bv, (a, b), (lambda g: _unbroadcast(g, np.shape(av)),
                                       lambda g: -_unbroadcast(g, np.shape(bv))))


def mul(a, b):
    av, bv = value(a), value(b)
    return custom_op(av * bv, (a, b), (lambda g: _unbroadcast(g * bv, np.shape(av)),
                                       lambda g: _unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return custom_op(out, (a, b), (lambda g: _unbroadcast(g / bv, np.shape(av)),
                                   lambda g: _unbroadcast(-g * out / bv, np.shape(bv))))


def relu(x):
    xv = value(x)
    mask = xv > 0
    return custom_op(np.where(mask, xv, 0.0), (x,), (lambda g: g * mask,))


def sigmoid(x):
    xv = value(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return custom_op(out, (x,), (lambda g: g * out * (1.0 - out),))


def log(x):
    xv = value(x)
    return custom_op(np.log(xv), (x,), (lambda g: g / xv,))


def square(x):
    xv = value(x)
    return custom_op(xv * xv, (x,), (lambda g: 2.0 * g * xv,))


def total(x, axis=None):
    """Sum over ``axis`` (all axes when None)."""
    xv = value(x)
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return custom_op(np.sum(xv, axis=axis), (x,), (vjp,))


def reshape(x, shape):
    xv = value(x)
    return custom_op(xv.reshape(shape), (x,), (lambda g: g.reshape(xv.shape),))


def diagonal(x):
    """Diagonal of the last two (square) axes."""
    xv = value(x)
    n = xv.shape[-1]

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., np.arange(n), np.arange(n)] = g
        return out

    return custom_op(np.diagonal(xv, axis1=-2, axis2=-1).copy(), (x,), (vjp,))


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(k):
        lo, hi = bounds[k], bounds[k + 1]
        return lambda g: np.take(g, np.arange(lo, hi), axis=axis)

    return custom_op(out, xs, [make(k) for k in range(len(xs))])


def gather(x, index):
    """Rows ``x[index]``; repeated indices accumulate in the gradient."""
    xv = value(x)

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, index, g)
        return out

    return custom_op(xv[index], (x,), (vjp,))


class Segments:
    """Contiguous segment layout for rows sorted by segment id."""

    def __init__(self, segment_ids, num_segments: int):
        ids = np.asarray(segment_ids, dtype=np.int64)
        if ids.size and np.any(np.diff(ids) < 0):
            raise ValueError("segment ids must be sorted")
        self.ids = ids
        self.num_segments = int(num_segments)
        self.counts = np.bincount(ids, minlength=num_segments)
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.nonempty = np.nonzero(self.counts)[0]
        self.starts = starts[self.nonempty]


def segment_max(x, seg: Segments):
    """Per-segment elementwise max; empty segments give 0.

    The gradient goes to the first row attaining the max in each column.
    """
    xv = value(x)
    n, d = xv.shape
    out = np.zeros((seg.num_segments, d), dtype=xv.dtype)
    if n == 0:
        return custom_op(out, (x,), (lambda g: np.zeros_like(xv),))
    mx = np.maximum.reduceat(xv, seg.starts, axis=0)
    out[seg.nonempty] = mx
    if not isinstance(x, Var):
        return out
    hit = xv == np.repeat(mx, seg.counts[seg.nonempty], axis=0)
    pos = np.where(hit, np.arange(n)[:, None], n)
    arg = np.minimum.reduceat(pos, seg.starts, axis=0)
    cols = np.broadcast_to(np.arange(d), arg.shape)

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[arg, cols] = g[seg.nonempty]
        return gx

    return custom_op(out, (x,), (vjp,))


def segment_sum(x, seg: Segments):
    xv = value(x)
    out = np.zeros((seg.num_segments,) + xv.shape[1:], dtype=xv.dtype)
    np.add.at(out, seg.ids, xv)
    return custom_op(out, (x,), (lambda g: g[seg.ids],))


def segment_mean(x, seg: Segments):
    denom = np.maximum(seg.counts, 1).astype(float)[:, None]
    return div(segment_sum(x, seg), denom)


def norm_projection(x):
    """Row-wise ``x / max(||x||, 1)``; rows on the unit sphere use the inside branch."""
    xv = value(x)
    nrm = np.linalg.norm(xv, axis=-1, keepdims=True)
    outside = nrm > 1.0
    scale = np.where(outside, nrm, 1.0)
    out = xv / scale

    def vjp(g):
        # outside: d(x/|x|) = (I - u u^T)/|x|
        radial = np.sum(g * out, axis=-1, keepdims=True)
        return np.where(outside, (g - radial * out) / scale, g)

    return custom_op(out, (x,), (vjp,))


# -- MLPs ---------------------------------------------------------------------

@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def widths(self) -> list[int]:
        return [value(self.weights[0]).shape[0]] + [value(W).shape[1] for W in self.weights]

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2])

    def validate(self):
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            Wv, bv = value(W), value(b)
            if bv.shape != (Wv.shape[1],):
                raise ShapeError(f"layer {k}: bias {bv.shape} vs weight {Wv.shape}")
            if k and Wv.shape[0] != value(self.weights[k - 1]).shape[1]:
                raise ShapeError(f"layer {k}: width mismatch with previous layer")


def init_glorot(widths, rng: np.random.Generator) -> MlpParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(p: MlpParams, x):
    """Affine + ReLU on hidden layers; the last layer is affine only."""
    if value(x).shape[-1] != value(p.weights[0]).shape[0]:
        raise ShapeError(f"input width {value(x).shape[-1]} != {value(p.weights[0]).shape[0]}")
    n = len(p.weights)
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        x = add(matmul(x, W), b)
        if k < n - 1:
            x = relu(x)
    return x


# -- adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list, grads: list) -> list:
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"param {k}: shape {p.shape} vs grad {g.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        new.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return new


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"GNNRRMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def pack_arrays(arrays) -> bytes:
    """``magic | u32 version | u32 count | per array: u32 ndim, u32 dims... | f64 LE data``."""
    arrays = [np.asarray(a, dtype="<f8") for a in arrays]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for a in arrays:
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def unpack_arrays(blob: bytes) -> list[np.ndarray]:
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", blob, off))
        off += 4 * ndim
    out = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(float))
        off += 8 * n
    if off != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return out
