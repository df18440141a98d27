"""
Training a graph network for power control
==========================================

The network sees each pair as a node and each interfering link as an edge.
It is trained without labels: the loss is the negative sum rate of its own
output.  This run is deliberately short (a minute or two on one core); the
``table1-small`` preset is the full-size version.
"""

import numpy as np

from gnnrrm import wcgcn
from gnnrrm.graph import build_graph, objective
from gnnrrm.scenario import RAYLEIGH, SystemConfig, make_dataset
from gnnrrm.wmmse import random_init, wmmse_batch

cfg = SystemConfig(num_pairs=10, channel_model=RAYLEIGH, snr_db=10.0)
train = make_dataset(cfg, 4000, seed=0, stream=0)
test = make_dataset(cfg, 200, seed=0, stream=1)

# %%
# WMMSE reference on the test set, from random starts.
V0 = random_init(np.random.default_rng(0), (len(test), 10, 1), cfg.pmax)
_, traj = wmmse_batch(test.H, test.weights, test.noise, cfg.pmax, V0, 100)
ref = traj[:, -1].mean()

# %%
# Three layers sharing one set of weights, MAX aggregation, sigmoid output.
params = wcgcn.init_wcgcn(1, np.random.default_rng(3))
print("MLP widths:", params.mlp1.widths, params.mlp2.widths)
print(f"untrained ratio {wcgcn.evaluate(params, test).mean() / ref:.3f}")


def show(epoch, loss, p):
    print(f"epoch {epoch + 1}: loss {loss:.3f}, test ratio {wcgcn.evaluate(p, test).mean() / ref:.3f}")


params, _ = wcgcn.train(params, train, epochs=12, batch_size=64, lr=1e-3, callback=show)

# %%
# The trained model is a fixed function of the graph: inference is one pass.
alloc = wcgcn.network_forward(params, build_graph(cfg, test[0].scenario, test[0].channel))
print("powers on the first test instance:", np.round(alloc[:, 0] ** 2, 2))
print(f"sum rate {objective(alloc, test[0].channel):.3f} vs WMMSE {traj[0, -1]:.3f}")
