"""
WMMSE on a small interference channel
=====================================

Ten transmitter/receiver pairs share one band.  We draw a Rayleigh channel,
run WMMSE from a random start and compare it with two cheap heuristics.
"""

import numpy as np

from gnnrrm.graph import objective
from gnnrrm.scenario import RAYLEIGH, SystemConfig, make_dataset
from gnnrrm.wmmse import best_of_restarts, strongest_baseline, wmmse_solve

cfg = SystemConfig(num_pairs=10, channel_model=RAYLEIGH, snr_db=10.0)
chan = make_dataset(cfg, 1, seed=7)[0].channel
print("channel tensor H[j, k] (tx j -> rx k):", chan.H.shape)

# %%
# One WMMSE run.  The trajectory never decreases.
rep = wmmse_solve(chan, iters=100, rng=np.random.default_rng(0))
print("sum rate after 0/10/100 iterations:",
      [round(float(rep.trajectory[i]), 3) for i in (0, 10, 100)])
print("powers:", np.round(np.sum(rep.allocation ** 2, axis=1), 3))

# %%
# Many links end at zero power: switching a link off is often worth more
# than the interference it causes.  Which links survive depends on the start,
# so restarts can pay off.
best = best_of_restarts(chan, 20, rng=np.random.default_rng(1))
print(f"single run {rep.objective:.3f}, best of 20 {best.objective:.3f}")

# %%
# Baselines: everyone at full power, and only the strongest 40% on.
full = objective(strongest_baseline(chan, 1.0), chan)
strong = objective(strongest_baseline(chan, 0.4), chan)
print(f"all on {full:.3f}, strongest 40% {strong:.3f}")
