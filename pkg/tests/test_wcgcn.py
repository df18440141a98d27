import math

import numpy as np
import pytest

from conftest import rayleigh_channels
from gnnrrm import nngrad as ng
from gnnrrm import wcgcn
from gnnrrm.graph import check_feasible, graph_from_edges, objective, permute, permute_alloc
from gnnrrm.scenario import RAYLEIGH, SystemConfig, make_dataset


def random_graph(rng, K, nt=1, p=0.6, seed=0):
    chan = rayleigh_channels(K, nt, seed=seed, weighted=True)[0]
    mask = rng.random((K, K)) < p
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return chan, graph_from_edges(chan, src, dst)


def full_graph(chan):
    K = chan.num_pairs
    src, dst = np.nonzero(~np.eye(K, dtype=bool))
    return graph_from_edges(chan, src, dst)


def zero_params(nt=1, beta=wcgcn.SIGMOID):
    p = wcgcn.init_wcgcn(nt, np.random.default_rng(0), beta=beta)
    return p.with_arrays([np.zeros_like(a) for a in p.arrays()])


def test_default_widths_match_published_shapes():
    p = wcgcn.init_wcgcn(1, np.random.default_rng(0))
    assert p.mlp1.widths == [5, 32, 32]
    assert p.mlp2.widths == [35, 16, 1] and p.features == "compact"
    q = wcgcn.init_wcgcn(2, np.random.default_rng(0))
    assert q.beta == wcgcn.PROJECTION and q.mlp1.widths == [12, 64, 64] and q.mlp2.widths == [74, 32, 4]


def test_param_validation():
    with pytest.raises(ValueError):
        wcgcn.init_wcgcn(2, np.random.default_rng(0), beta=wcgcn.SIGMOID)
    with pytest.raises(ng.ShapeError):
        wcgcn.init_wcgcn(1, np.random.default_rng(0), mlp2=[37, 16, 1])
    assert wcgcn.init_wcgcn(1, np.random.default_rng(0), features="log-snr").mlp2.widths == [37, 16, 1]
    with pytest.raises(ValueError):
        wcgcn.init_wcgcn(2, np.random.default_rng(0), features="compact")
    with pytest.raises(ValueError):
        wcgcn.init_wcgcn(1, np.random.default_rng(0), aggregator="min")


def test_compact_features_by_hand():
    chan = rayleigh_channels(3, 1, weighted=True, seed=2)[0]
    g = graph_from_edges(chan, [0, 2], [1, 1])
    prep = wcgcn.prepare_graph(wcgcn.init_wcgcn(1, np.random.default_rng(0)), g)
    snr = np.abs(chan.H[..., 0]) ** 2 / chan.noise[None, :]
    assert np.allclose(prep.static, np.stack([np.log1p(np.diag(snr)), chan.weights], axis=1))
    for e, (j, i) in enumerate(g.edge_index):
        expect = [np.log1p(snr[j, j]), chan.weights[j], np.log1p(snr[j, i]),
                  np.log1p(np.abs(chan.H[i, j, 0]) ** 2 / chan.noise[j])]
        assert np.allclose(prep.edge[e], expect)


def test_zero_params_give_half_power(rng):
    chan, g = random_graph(rng, 6)
    alloc = wcgcn.network_forward(zero_params(), g, pmax=2.0)
    assert np.array_equal(alloc[:, 0] ** 2, np.full(6, 1.0))


def test_duplicate_edge_leaves_output_unchanged(rng):
    params = wcgcn.init_wcgcn(1, rng)
    for trial in range(5):
        chan, g = random_graph(rng, 7, seed=trial)
        src, dst = g.src, g.dst
        e = rng.integers(len(src))
        g2 = graph_from_edges(chan, np.append(src, src[e]), np.append(dst, dst[e]))
        assert g2.num_edges == g.num_edges + 1
        assert np.array_equal(wcgcn.network_forward(params, g), wcgcn.network_forward(params, g2))


@pytest.mark.parametrize("nt", [1, 2])
def test_permutation_equivariance(rng, nt):
    params = wcgcn.init_wcgcn(nt, rng)
    for trial in range(5):
        chan, g = random_graph(rng, 8, nt, seed=trial)
        perm = rng.permutation(8)
        out = wcgcn.network_forward(params, g)
        out_p = wcgcn.network_forward(params, permute(g, perm))
        assert np.max(np.abs(out_p - permute_alloc(out, perm))) <= 1e-10


def test_single_layer_network_equals_layer_forward(rng):
    params = wcgcn.init_wcgcn(1, rng, num_layers=1)
    _, g = random_graph(rng, 5)
    state = wcgcn.layer_forward(params, g)
    assert np.allclose(wcgcn.network_forward(params, g)[:, 0] ** 2, state[:, 0], rtol=1e-15, atol=0)
    with pytest.raises(ng.ShapeError):
        wcgcn.layer_forward(params, g, np.zeros((4, 1)))


@pytest.mark.parametrize("nt", [1, 2])
def test_outputs_are_feasible(rng, nt):
    params = wcgcn.init_wcgcn(nt, rng)
    params = params.with_arrays([a * 20 for a in params.arrays()])
    for trial in range(3):
        _, g = random_graph(rng, 6, nt, seed=trial)
        assert check_feasible(wcgcn.network_forward(params, g, pmax=3.0), 3.0)


def test_graph_without_edges(rng):
    params = wcgcn.init_wcgcn(2, rng)
    chan = rayleigh_channels(3, 2)[0]
    g = graph_from_edges(chan, [], [])
    assert wcgcn.network_forward(params, g).shape == (3, 4)


def test_model_rejects_wrong_antenna_count(rng):
    _, g = random_graph(rng, 4, nt=2)
    with pytest.raises(ng.ShapeError):
        wcgcn.network_forward(wcgcn.init_wcgcn(1, rng), g)


def test_infer_matches_forward(rng):
    params = wcgcn.init_wcgcn(1, rng)
    _, g = random_graph(rng, 6)
    alloc, secs = wcgcn.infer(params, g)
    assert np.array_equal(alloc, wcgcn.network_forward(params, g)) and secs >= 0
    graphs = [random_graph(rng, 6, seed=s)[1] for s in range(3)]
    for a, gg in zip(wcgcn.infer_batch(params, graphs), graphs):
        assert np.allclose(a, wcgcn.network_forward(params, gg), rtol=0, atol=1e-14)


@pytest.mark.parametrize("agg", ["sum", "mean"])
def test_other_aggregators_stay_equivariant(rng, agg):
    params = wcgcn.init_wcgcn(1, rng, aggregator=agg)
    _, g = random_graph(rng, 6)
    perm = rng.permutation(6)
    out = wcgcn.network_forward(params, g)
    assert np.allclose(wcgcn.network_forward(params, permute(g, perm)), permute_alloc(out, perm), atol=1e-12)


def test_single_pair_loss_closed_form():
    chan = rayleigh_channels(1, 1, weighted=True, seed=4)[0]
    params = zero_params()
    params.mlp2.biases[-1][:] = 0.7
    g = graph_from_edges(chan, [], [])
    batch = wcgcn.make_loss_batch(params, [g], chan.H[None], chan.weights[None], chan.noise[None])
    p = 2.0 / (1 + math.exp(-0.7))
    expect = -chan.weights[0] * math.log2(1 + abs(chan.H[0, 0, 0]) ** 2 * p / chan.noise[0])
    assert float(wcgcn.unsup_loss(params, batch, pmax=2.0)) == pytest.approx(expect, rel=1e-13)


@pytest.mark.parametrize("nt", [1, 2])
def test_loss_is_negative_mean_objective(rng, nt):
    params = wcgcn.init_wcgcn(nt, rng)
    chans = rayleigh_channels(5, nt, n=4, weighted=True, seed=9)
    graphs = [full_graph(c) for c in chans]
    batch = wcgcn.make_loss_batch(params, graphs, np.stack([c.H for c in chans]),
                                  np.stack([c.weights for c in chans]), np.stack([c.noise for c in chans]))
    loss = float(wcgcn.unsup_loss(params, batch, pmax=1.5))
    objs = [objective(wcgcn.network_forward(params, g, pmax=1.5), c) for g, c in zip(graphs, chans)]
    assert abs(loss + np.mean(objs)) <= 1e-12


@pytest.mark.parametrize("nt", [1, 2])
def test_gradient_matches_finite_differences(rng, nt):
    params = wcgcn.init_wcgcn(nt, rng, mlp1=None)
    params = params.with_arrays([a.astype(np.longdouble) for a in params.arrays()])
    chans = rayleigh_channels(4, nt, n=2, weighted=True, seed=nt)
    batch = wcgcn.make_loss_batch(params, [full_graph(c) for c in chans], np.stack([c.H for c in chans]),
                                  np.stack([c.weights for c in chans]), np.stack([c.noise for c in chans]))
    _, grads = wcgcn.loss_and_grads(params, batch)
    arrays = params.arrays()
    h = 1e-6
    for k in (0, 1, len(arrays) - 2, len(arrays) - 1):
        a = arrays[k]
        for idx in list(np.ndindex(a.shape))[:6]:
            def f(delta):
                b = [x.copy() for x in arrays]
                b[k][idx] += delta
                return float(wcgcn.unsup_loss(params.with_arrays(b), batch))
            num = (f(h) - f(-h)) / (2 * h)
            g = float(grads[k][idx])
            assert abs(g - num) / max(abs(g), 1e-8) <= 1e-5 or abs(g - num) <= 1e-10


def small_dataset(n, K=4, seed=0):
    cfg = SystemConfig(num_pairs=K, channel_model=RAYLEIGH, snr_db=10.0)
    return make_dataset(cfg, n, seed)


def test_zero_learning_rate_keeps_params():
    ds = small_dataset(8)
    params = wcgcn.init_wcgcn(1, np.random.default_rng(0))
    out, curve = wcgcn.train(params, ds, epochs=2, batch_size=4, lr=0.0)
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), out.arrays()))
    assert len(curve) == 2


def test_overfits_small_set():
    ds = small_dataset(10, seed=3)
    params = wcgcn.init_wcgcn(1, np.random.default_rng(1))
    before = wcgcn.evaluate(params, ds).mean()
    trained, curve = wcgcn.train(params, ds, epochs=400, batch_size=10, lr=3e-3)
    after = wcgcn.evaluate(trained, ds).mean()
    assert after > before and curve[-1] < curve[0]
    assert curve[-1] == pytest.approx(-after, rel=0.05)


def test_training_is_deterministic_and_resumable():
    ds = small_dataset(12, seed=5)
    params = wcgcn.init_wcgcn(1, np.random.default_rng(2))
    a, ca = wcgcn.train(params, ds, epochs=4, batch_size=5, rng=np.random.default_rng(7))
    rng, adam = np.random.default_rng(7), ng.AdamState()
    mid, _ = wcgcn.train(params, ds, epochs=2, batch_size=5, rng=rng, adam=adam)
    b, cb = wcgcn.train(mid, ds, epochs=4, batch_size=5, rng=rng, adam=adam, start_epoch=2)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert cb == ca[2:]


def test_empty_dataset_rejected():
    ds = small_dataset(3).subset([])
    with pytest.raises(ValueError):
        wcgcn.train(wcgcn.init_wcgcn(1, np.random.default_rng(0)), ds)


def test_lr_schedule():
    sched = [[10, 1e-4], [5, 5e-4]]
    assert [wcgcn.lr_at(e, 1e-3, sched) for e in (0, 4, 5, 9, 10, 30)] == [1e-3, 1e-3, 5e-4, 5e-4, 1e-4, 1e-4]
    assert wcgcn.lr_at(3, 2e-3) == 2e-3


def test_decimal_oracle_agrees_with_loss(rng):
    import decimal_oracle as dor
    params = wcgcn.init_wcgcn(1, rng)
    chan = rayleigh_channels(5, 1, seed=21, weighted=True)[0]
    g = full_graph(chan)
    batch = wcgcn.make_loss_batch(params, [g], chan.H[None], chan.weights[None], chan.noise[None])
    ref = dor.loss(wcgcn.prepare_graph(params, g), *(lambda d: (d[:2], d[2:]))(dor.to_decimal_layers(params.arrays())),
                   params.num_layers, chan.H, chan.weights, chan.noise)
    assert float(wcgcn.unsup_loss(params, batch)) == pytest.approx(float(ref), rel=1e-13)
