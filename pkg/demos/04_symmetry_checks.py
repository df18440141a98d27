"""
Relabelling pairs
=================

Nothing about the network depends on the order in which pairs are numbered.
Permuting the nodes of the input graph permutes the output the same way, and
a duplicated in-edge leaves the MAX aggregate untouched.
"""

import numpy as np

from gnnrrm import wcgcn
from gnnrrm.graph import graph_from_edges, objective, permute, permute_alloc, permute_channel
from gnnrrm.scenario import RAYLEIGH, SystemConfig, make_dataset

rng = np.random.default_rng(0)
cfg = SystemConfig(num_pairs=8, num_tx_antennas=2, channel_model=RAYLEIGH)
chan = make_dataset(cfg, 1, seed=2)[0].channel
src, dst = np.nonzero(~np.eye(8, dtype=bool))
g = graph_from_edges(chan, src, dst)
params = wcgcn.init_wcgcn(2, rng)

perm = rng.permutation(8)
out = wcgcn.network_forward(params, g)
out_perm = wcgcn.network_forward(params, permute(g, perm))
print("equivariance error:", np.abs(out_perm - permute_alloc(out, perm)).max())
print("objective change:", objective(out, chan) - objective(out_perm, permute_channel(chan, perm)))

# %%
# Send the message on edge 0 twice.
g2 = graph_from_edges(chan, np.append(src, src[0]), np.append(dst, dst[0]))
print("outputs identical after duplicating an edge:",
      np.array_equal(out, wcgcn.network_forward(params, g2)))
