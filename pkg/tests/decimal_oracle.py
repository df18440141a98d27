"""Independent high-precision forward pass of the power-control network.

Written from scratch with :mod:`decimal` (no numpy arithmetic) so that
central differences at h = 1e-6 are free of rounding noise.  Only the
parameter-free inputs (prepared node/edge features) are taken from the
package.
"""
from decimal import Decimal, localcontext

PREC = 50


def _d(x):
    return Decimal(float(x))


def _mlp(layers, x):
    n = len(layers)
    for k, (W, b) in enumerate(layers):
        x = [sum((x[i] * W[i][j] for i in range(len(x))), b[j]) for j in range(len(b))]
        if k < n - 1:
            x = [v if v > 0 else Decimal(0) for v in x]
    return x


def to_decimal_layers(arrays):
    """[W0, b0, W1, b1, ...] -> [(W, b), ...] as nested lists of Decimals."""
    layers = []
    for W, b in zip(arrays[0::2], arrays[1::2]):
        layers.append(([[_d(v) for v in row] for row in W], [_d(v) for v in b]))
    return layers


def central_difference(f, cell, idx, h):
    """(f(x+h) - f(x-h)) / 2h after nudging ``cell[idx]`` (a nested list entry) in place."""
    if len(idx) == 2:
        row, col = cell[idx[0]], idx[1]
    else:
        row, col = cell, idx[0]
    orig = row[col]
    with localcontext() as ctx:
        ctx.prec = PREC
        hd = _d(h)
        row[col] = orig + hd
        up = f()
        row[col] = orig - hd
        dn = f()
        row[col] = orig
        return float((up - dn) / (2 * hd))


def loss(prep, mlp1, mlp2, num_layers, H, weights, noise, pmax=1.0):
    """Negative weighted sum rate (bits) of one sigmoid-mode instance."""
    with localcontext() as ctx:
        ctx.prec = PREC
        K = prep.num_nodes
        static = [[_d(v) for v in row] for row in prep.static]
        edge = [[_d(v) for v in row] for row in prep.edge]
        state = [_d(prep.init[k, 0]) for k in range(K)]
        src, dst = [int(s) for s in prep.src], [int(t) for t in prep.dst]
        for _ in range(num_layers):
            agg = [None] * K
            for e in range(len(src)):
                m = _mlp(mlp1, [state[src[e]]] + edge[e])
                i = dst[e]
                agg[i] = m if agg[i] is None else [max(a, b) for a, b in zip(agg[i], m)]
            width = len(mlp1[-1][1])
            new = []
            for k in range(K):
                a = agg[k] if agg[k] is not None else [Decimal(0)] * width
                z = _mlp(mlp2, static[k] + [state[k]] + a)[0]
                new.append(1 / (1 + (-z).exp()))
            state = new
        p = [_d(pmax) * s for s in state]
        gain = [[_d(H[j, k, 0].real) ** 2 + _d(H[j, k, 0].imag) ** 2 for k in range(K)] for j in range(K)]
        ln2 = Decimal(2).ln()
        total = Decimal(0)
        for k in range(K):
            interf = sum((gain[j][k] * p[j] for j in range(K) if j != k), Decimal(0))
            sinr = gain[k][k] * p[k] / (interf + _d(noise[k]))
            total += _d(weights[k]) * (1 + sinr).ln() / ln2
        return -total
