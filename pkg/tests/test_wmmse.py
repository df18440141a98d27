import math

import numpy as np
import pytest

from conftest import rayleigh_channels
from gnnrrm.graph import alloc_from_beams, beams_from_alloc, check_feasible, objective, permute_channel
from gnnrrm.wmmse import (best_of_restarts, best_of_restarts_batch, bisect_mu, bisect_mu_batched,
                          half_power_init, random_init, strongest_baseline, uw_update, wmmse_batch,
                          wmmse_solve)

# optimum of a 1001 x 1001 power grid on seeded K=2 rayleigh instances (frozen oracle output)
GRID_OPTIMA = {
    (0, 0.0): 0.7203710360663551,
    (1, 0.0): 1.5075711109397107,
    (1, 10.0): 4.280443730061813,
    (3, 10.0): 4.257698086382557,
}


def grid_optimum(chan, n=1001):
    g = np.abs(chan.H[..., 0]) ** 2
    p = np.linspace(0, 1, n)
    P1, P2 = np.meshgrid(p, p, indexing="ij")
    r = (np.log2(1 + g[0, 0] * P1 / (g[1, 0] * P2 + chan.noise[0]))
         + np.log2(1 + g[1, 1] * P2 / (g[0, 1] * P1 + chan.noise[1])))
    return r.max()


def power_gradient(p, chan, eps=1e-7):
    def f(q):
        return objective(alloc_from_beams(np.sqrt(q)[:, None].astype(complex)), chan)
    out = np.empty_like(p)
    for k in range(p.size):
        d = np.zeros_like(p)
        d[k] = eps
        out[k] = (f(np.clip(p + d, 0, None)) - f(np.clip(p - d, 0, None))) / (2 * eps)
    return out


@pytest.mark.parametrize("key", sorted(GRID_OPTIMA))
def test_grid_oracle_value_is_reproduced(key):
    seed, snr = key
    chan = rayleigh_channels(2, 1, snr_db=snr, seed=seed)[0]
    assert grid_optimum(chan) == pytest.approx(GRID_OPTIMA[key], abs=1e-12)
    best = best_of_restarts(chan, 20, rng=np.random.default_rng(0))
    assert abs(best.objective - GRID_OPTIMA[key]) <= 1e-3


def test_single_run_is_stationary_when_below_grid():
    # seed 0 at 0 dB: one random start ends on a worse stationary point
    chan = rayleigh_channels(2, 1, snr_db=0.0, seed=0)[0]
    rep = wmmse_solve(chan, rng=np.random.default_rng(1))
    assert rep.objective < GRID_OPTIMA[(0, 0.0)] - 1e-3
    p = np.sum(rep.allocation ** 2, axis=1)
    grad = power_gradient(p, chan)
    interior = (p > 1e-6) & (p < 1 - 1e-6)
    assert np.all(np.abs(grad[interior]) < 1e-5)
    assert np.all(grad[p >= 1 - 1e-6] > -1e-5)


def test_bisect_mu_closed_forms():
    mu, v = bisect_mu(np.eye(2), np.array([1.0, 0.0]), 1.0)
    assert mu == 0.0 and np.allclose(v, [1, 0])
    mu, v = bisect_mu(np.eye(2), np.array([2.0, 0.0]), 1.0)
    assert mu == pytest.approx(1.0, rel=1e-10) and np.allclose(v, [1, 0])
    mu, v = bisect_mu(np.eye(2), np.zeros(2), 1.0)
    assert mu == 0.0 and not np.any(v)


def test_bisect_mu_power_and_solution(rng):
    for nt in (1, 2, 4):
        A = rng.standard_normal((500, nt, nt)) + 1j * rng.standard_normal((500, nt, nt))
        M = A @ A.conj().transpose(0, 2, 1) * rng.uniform(0, 1, (500, 1, 1)) ** 3
        b = (rng.standard_normal((500, nt)) + 1j * rng.standard_normal((500, nt))) * rng.uniform(0, 10, (500, 1))
        mu, v = bisect_mu_batched(M, b, 2.0)
        p = np.sum(np.abs(v) ** 2, axis=1)
        active = mu > 0
        assert np.all(p <= 2.0 * (1 + 1e-12))
        assert np.all(p[active] >= 2.0 * (1 - 1e-8))
        direct = np.linalg.solve(M + mu[:, None, None] * np.eye(nt), b[..., None])[..., 0]
        assert np.allclose(v, direct, rtol=1e-9, atol=1e-12)


def test_bisect_mu_singular_matrix():
    mu, v = bisect_mu(np.zeros((1, 1)), np.array([3.0 + 4.0j]), 1.0)
    assert mu == pytest.approx(5.0) and abs(v[0]) == pytest.approx(1.0)


@pytest.mark.parametrize("nt", [1, 2])
def test_monotone_trajectory(nt):
    for K in (2, 5, 10):
        chans = rayleigh_channels(K, nt, n=5, weighted=True, seed=K)
        for n, chan in enumerate(chans):
            rep = wmmse_solve(chan, iters=60, rng=np.random.default_rng(n))
            assert len(rep.trajectory) == 61
            assert np.all(np.diff(rep.trajectory) >= -1e-9)
            assert check_feasible(rep.allocation, 1.0)


def test_mse_weights_at_least_one():
    chan = rayleigh_channels(6, 2, seed=3)[0]
    V = random_init(np.random.default_rng(0), (6, 2), 1.0)
    _, W = uw_update(chan.H, V, chan.noise)
    assert np.all(W >= 1.0)


def test_single_pair_goes_to_full_power():
    for seed in range(5):
        chan = rayleigh_channels(1, 2, seed=seed)[0]
        rep = wmmse_solve(chan, iters=50, pmax=2.0, rng=np.random.default_rng(seed))
        assert np.sum(rep.allocation ** 2) >= 0.999 * 2.0


def test_init_validation():
    chan = rayleigh_channels(3)[0]
    with pytest.raises(ValueError):
        wmmse_solve(chan, iters=0)
    with pytest.raises(ValueError):
        wmmse_solve(chan, init=np.full((3, 1), 2.0))


def test_random_init_is_feasible_and_spread(rng):
    V = random_init(rng, (4000, 3), 2.0)
    p = np.sum(np.abs(V) ** 2, axis=1)
    assert p.max() <= 2.0
    assert abs(p.mean() - 1.0) < 3 * math.sqrt(4 / 12) / math.sqrt(4000)


def test_half_power_init():
    V = half_power_init((2, 3, 2), 2.0)
    assert np.allclose(np.sum(np.abs(V) ** 2, axis=-1), 1.0)


def test_explicit_init_is_deterministic():
    chan = rayleigh_channels(4, 2, seed=8)[0]
    V0 = random_init(np.random.default_rng(5), (4, 2), 1.0)
    a = wmmse_solve(chan, init=V0)
    b = wmmse_solve(chan, init=V0)
    assert np.array_equal(a.allocation, b.allocation)


def test_equivariant_given_permuted_init(rng):
    chan = rayleigh_channels(6, 2, weighted=True, seed=11)[0]
    V0 = random_init(rng, (6, 2), 1.0)
    perm = rng.permutation(6)
    V0p = np.empty_like(V0)
    V0p[perm] = V0
    a = wmmse_solve(chan, iters=30, init=V0)
    b = wmmse_solve(permute_channel(chan, perm), iters=30, init=V0p)
    assert np.allclose(b.allocation[perm], a.allocation, atol=1e-9)
    assert np.allclose(a.trajectory, b.trajectory, atol=1e-9)


def test_restarts_dominate_single_runs():
    for seed in range(5):
        chan = rayleigh_channels(5, 1, seed=seed)[0]
        best = best_of_restarts(chan, 10, rng=np.random.default_rng(seed))
        assert best.objective == max(best.extra["finals"])
        one = best_of_restarts(chan, 1, rng=np.random.default_rng(seed))
        assert best.objective >= one.objective - 1e-12


def test_restarts_batch_matches_loop():
    chans = rayleigh_channels(4, 1, n=3, seed=2)
    H = np.stack([c.H for c in chans])
    w = np.stack([c.weights for c in chans])
    n = np.stack([c.noise for c in chans])
    V, obj = best_of_restarts_batch(H, w, n, 1.0, 4, 20, np.random.default_rng(0))
    for i, c in enumerate(chans):
        assert objective(alloc_from_beams(V[i]), c) == pytest.approx(obj[i])


def test_strongest_matches_sort_oracle():
    chan = rayleigh_channels(10, 2, seed=6)[0]
    alloc = strongest_baseline(chan, 0.35)
    gains = [np.linalg.norm(chan.H[k, k]) for k in range(10)]
    chosen = sorted(range(10), key=lambda k: -gains[k])[:4]
    p = np.sum(alloc ** 2, axis=1)
    assert set(np.nonzero(p > 0)[0]) == set(chosen)
    assert np.allclose(p[chosen], 1.0)
    V = beams_from_alloc(alloc)
    for k in chosen:
        assert abs(np.vdot(chan.H[k, k], V[k])) == pytest.approx(gains[k])


def test_strongest_edge_cases():
    chan = rayleigh_channels(4)[0]
    assert np.allclose(np.sum(strongest_baseline(chan, 1.0) ** 2, axis=1), 1.0)
    single = rayleigh_channels(1)[0]
    assert np.sum(strongest_baseline(single, 0.1) ** 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        strongest_baseline(chan, 0.0)


def test_batch_trajectory_tracking_flag():
    chan = rayleigh_channels(3, 1, seed=1)[0]
    V0 = half_power_init((3, 1), 1.0)
    V1, t1 = wmmse_batch(chan.H, chan.weights, chan.noise, 1.0, V0, 7)
    V2, t2 = wmmse_batch(chan.H, chan.weights, chan.noise, 1.0, V0, 7, track=False)
    assert np.array_equal(V1, V2) and t2.shape == (1,) and t2[0] == t1[-1]


def test_report_serialization():
    rep = wmmse_solve(rayleigh_channels(2)[0], iters=3, rng=np.random.default_rng(0))
    d = rep.to_dict()
    assert d["iterations"] == 3 and len(d["trajectory"]) == 4
