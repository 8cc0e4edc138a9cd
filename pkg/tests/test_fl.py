import numpy as np
import pytest

from ssfl import masks as mk
from ssfl.data import ClientShard, EpochSampler, PartitionSpec, make_synthetic, sample_balanced_minibatch
from ssfl.fl import (
    FLConfig,
    OODSchedule,
    Simulation,
    SyntheticSpec,
    aggregate,
    discover_mask,
    local_train,
    local_train_many,
    run,
)
from ssfl.nn import backward, init_kaiming, mlp_layout

TINY = SyntheticSpec(num_classes=4, num_features=6, per_class=40, test_per_class=10, spread=3.0)


def tiny(**kw):
    base = dict(K=4, R=2, hidden=(8,), data=TINY, local_steps=3, partition=PartitionSpec(alpha=1.0))
    base.update(kw)
    return FLConfig(**base)


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic(4, 6, 40, 3.0, seed=0)


def test_local_train_zero_steps(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 5, 4])
    w = init_kaiming(layout, 0)
    shard = ClientShard(0, np.arange(20))
    out = local_train(w, layout, tr, EpochSampler(shard, np.random.default_rng(0)), None, 0, 0.1, 5e-4, 16)
    assert np.array_equal(out, w) and out is not w


def test_local_train_full_batch_single_step(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 5, 4])
    w = np.random.default_rng(1).normal(size=layout.total_params)
    idx = np.arange(30, 60)
    shard = ClientShard(0, idx)
    out = local_train(w, layout, tr, EpochSampler(shard, np.random.default_rng(0)), None, 1, 0.05, 1e-3, len(idx))
    # full batch: order is irrelevant, so compute the gradient on the shard directly
    g = backward(w, layout, tr.batch(idx))
    np.testing.assert_allclose(out, w - 0.05 * (g + 1e-3 * w), rtol=1e-12, atol=1e-14)


def test_local_train_respects_mask(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 5, 4])
    mask = mk.random_mask(layout.total_params, 0.5, 0)
    w = init_kaiming(layout, 0) * mask
    shard = ClientShard(0, np.arange(100))
    out = local_train(w, layout, tr, EpochSampler(shard, np.random.default_rng(0)), mask, 20, 0.1, 5e-4, 16)
    assert np.all(out[~mask] == 0.0) and not np.array_equal(out, w)


def test_aggregate_examples():
    w = np.array([1.0, -2.0])
    assert np.array_equal(aggregate([w], [7]), w)
    assert aggregate([np.array([0.0]), np.array([4.0])], [1, 3])[0] == 3.0
    a, b = np.array([1.0, 5.0]), np.array([3.0, -1.0])
    assert np.array_equal(aggregate([a, b], [2, 2]), [2.0, 2.0])


def test_aggregate_equal_sizes_is_plain_mean():
    rng = np.random.default_rng(0)
    ws = [rng.normal(size=30) for _ in range(5)]
    expected = (((ws[0] + ws[1]) + ws[2]) + ws[3] + ws[4]) / 5
    assert np.array_equal(aggregate(ws, [9] * 5), expected)


def test_aggregate_preserves_common_mask():
    rng = np.random.default_rng(0)
    mask = rng.random(40) < 0.5
    ws = [rng.normal(size=40) * mask for _ in range(3)]
    assert np.all(aggregate(ws, [1, 2, 5])[~mask] == 0.0)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(ValueError):
        aggregate([np.ones(2), np.ones(3)], [1, 1])
    with pytest.raises(ValueError):
        aggregate([np.ones(2)], [0])


def test_discover_single_client_is_centralized(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 8, 4])
    w = init_kaiming(layout, 3)
    shard = ClientShard(0, np.arange(len(tr)))
    mask = discover_mask(w, layout, tr, [shard], 0.5, 16, [np.random.default_rng(9)])
    batch = sample_balanced_minibatch(shard, tr, 16, np.random.default_rng(9))
    assert np.array_equal(mask, mk.topk_mask(mk.local_saliency(w, layout, batch), 0.5))


def test_discover_identical_clients(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 8, 4])
    w = init_kaiming(layout, 3)
    shards = [ClientShard(i, np.arange(80)) for i in range(5)]
    rngs = [np.random.default_rng(4) for _ in shards]
    mask = discover_mask(w, layout, tr, shards, 0.6, 16, rngs)
    batch = sample_balanced_minibatch(shards[0], tr, 16, np.random.default_rng(4))
    assert np.array_equal(mask, mk.topk_mask(mk.local_saliency(w, layout, batch), 0.6))


def test_discover_beats_random_against_oracle():
    from ssfl.data import partition

    errs, rand = [], []
    for seed in range(5):
        tr, _ = make_synthetic(10, 32, 500, 3.0, seed=seed)
        layout = mlp_layout([32, 32, 32, 10])
        w = init_kaiming(layout, seed)
        shards = partition(tr, PartitionSpec(K=16, alpha=0.3, seed=seed)).shards
        rngs = [np.random.default_rng([seed, i]) for i in range(16)]
        m = discover_mask(w, layout, tr, shards, 0.5, 16, rngs)
        oracle = mk.oracle_mask(w, layout, tr.batch(), 0.5)
        errs.append(mk.mask_error(m, oracle))
        rand.append(mk.mask_error(mk.random_mask(layout.total_params, 0.5, seed), oracle))
    assert np.mean(errs) < np.mean(rand)


def test_exempt_coordinates_always_kept(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 8, 4])
    w = init_kaiming(layout, 0)
    exempt = np.zeros(layout.total_params, dtype=bool)
    exempt[layout.layers[1].slice] = True  # fc1.bias, saliency 0 at init
    m = discover_mask(w, layout, tr, [ClientShard(0, np.arange(50))], 0.5, 16, [np.random.default_rng(0)], exempt)
    assert np.all(m[exempt]) and m.sum() == mk.active_count(layout.total_params, 0.5)


def test_zero_rounds_reports_initial_model():
    metrics = run(tiny(R=0))
    assert len(metrics) == 1 and metrics[0].round == 0
    assert all(v == 0 for v in metrics[0].uplink.values())


def test_dense_uplink_bytes():
    sim = Simulation(tiny(variant="dense"))
    metrics = sim.run()
    for m in metrics[1:]:
        assert m.uplink["values_only"] == 4 * sim.d * 4
        assert m.uplink["dense"] == m.uplink["values_only"]


def test_ssfl_uplink_is_half_of_dense():
    cfg = tiny(hidden=(8, 6))
    sim = Simulation(cfg)
    assert sim.d % 2 == 0
    ss = sim.run()
    de = run(tiny(hidden=(8, 6), variant="dense"))
    for a, b in zip(ss[1:], de[1:]):
        assert 2 * a.uplink["values_only"] == b.uplink["values_only"]
        assert 2 * a.downlink["values_only"] == b.downlink["values_only"]
    sal, mask = sim.ledger.summarize()["setup"].values()
    assert sal == 4 * 4 * sim.d and mask == 4 * ((sim.d + 7) // 8)


@pytest.mark.parametrize("variant", ["ssfl", "random_global", "shuffled", "warmup"])
def test_effective_model_closed_under_mask(variant):
    cfg = tiny(variant=variant, R=4, warmup_rounds=2)
    sim = Simulation(cfg)
    sim.setup_masks()
    for r in range(cfg.R):
        sim.train_round(r)
        if sim.mask is not None:
            eff = sim.effective()
            assert np.all(eff[~sim.mask] == 0.0)
            assert sim.mask.sum() == mk.active_count(sim.d, cfg.sigma)
    assert sim.mask is not None


def test_masked_coordinates_keep_initial_values():
    sim = Simulation(tiny(R=3))
    w0 = sim.w.copy()
    sim.run()
    assert np.array_equal(sim.w[~sim.mask], w0[~sim.mask])
    assert not np.array_equal(sim.w[sim.mask], w0[sim.mask])


def test_shuffled_keeps_layer_counts():
    a = Simulation(tiny())
    a.setup_masks()
    b = Simulation(tiny(variant="shuffled"))
    b.setup_masks()
    for layer in a.layout.layers:
        assert a.mask[layer.slice].sum() == b.mask[layer.slice].sum()


def test_random_local_masks_differ_per_client():
    sim = Simulation(tiny(variant="random_local"))
    sim.setup_masks()
    masks = [c.mask for c in sim.clients]
    assert not np.array_equal(masks[0], masks[1])
    assert all(m.sum() == mk.active_count(sim.d, 0.5) for m in masks)


def test_topk_weights_uplink_is_sparse():
    cfg = tiny(variant="topk_weights")
    sim = Simulation(cfg)
    metrics = sim.run()
    k = mk.active_count(sim.d, cfg.sigma)
    assert metrics[1].uplink["values_only"] == 4 * 4 * k
    assert metrics[1].downlink["values_only"] == 4 * 4 * sim.d


def test_warmup_discovers_after_w_rounds():
    cfg = tiny(variant="warmup", R=4, warmup_rounds=2)
    metrics = run(cfg)
    dense_bytes = metrics[1].uplink["values_only"]
    assert metrics[2].uplink["values_only"] == dense_bytes
    assert 2 * metrics[3].uplink["values_only"] <= dense_bytes + 8


def test_client_fraction_selects_ceiling():
    sim = Simulation(tiny(K=5, client_fraction=0.5))
    assert len(sim.select()) == 3


def test_reproducible():
    a = [m.as_row() for m in run(tiny(R=3))]
    b = [m.as_row() for m in run(tiny(R=3))]
    assert a == b
    c = [m.as_row() for m in run(tiny(R=3, seed=1))]
    assert a != c


def test_metrics_ranges():
    for m in run(tiny(R=3)):
        assert 0.0 <= m.global_acc <= 1.0
        assert 0.0 <= m.p10_local_acc <= m.median_local_acc <= 1.0


def test_validate_names_field():
    with pytest.raises(ValueError, match="^sigma:"):
        tiny(sigma=1.0).validate()
    with pytest.raises(ValueError, match="^variant:"):
        tiny(variant="magic").validate()
    with pytest.raises(ValueError, match="^client_fraction:"):
        tiny(client_fraction=0.0).validate()


def test_learning_something():
    cfg = tiny(R=10, local_steps=None, local_epochs=1.0, variant="dense")
    metrics = run(cfg)
    assert metrics[-1].global_acc > 0.6 > metrics[0].global_acc


def ood_cfg(**kw):
    base = dict(K=6, R=14, hidden=(16,), local_steps=None, local_epochs=1.0,
                data=SyntheticSpec(num_classes=5, num_features=8, per_class=60, test_per_class=40, spread=4.0),
                ood=OODSchedule(holdout_classes=[4], refresh_round=6, new_clients=2),
                partition=PartitionSpec(alpha=1.0))
    base.update(kw)
    return FLConfig(**base)


def test_ood_refresh_changes_mask_and_learns_new_class():
    probe = Simulation(ood_cfg())
    probe.setup_masks()
    before = probe.mask
    sim = Simulation(ood_cfg())
    assert all(not c.active for c in sim.clients[6:]) and len(sim.clients) == 8
    metrics = sim.run()
    assert mk.mask_error(sim.mask, before) > 0.0
    assert metrics[6].heldout_acc < 0.5
    assert metrics[-1].heldout_acc > 0.8
    # one extra saliency upload per active client at the refresh
    sal = [e for e in sim.ledger.setup if e.scheme == "saliency"]
    assert len(sal) == 6 + 8


def test_ood_refresh_self_consistent():
    a = Simulation(ood_cfg())
    a.setup_masks()
    b = Simulation(ood_cfg())
    b.setup_masks()
    a.refreshes = b.refreshes = 5
    assert np.array_equal(a.ood_adapt(0), b.ood_adapt(0))
    # no new data and the same minibatches: refreshing from w0 reproduces the round-0 mask
    c = Simulation(ood_cfg())
    first = c.discover(0)
    c.refreshes = 0
    assert np.array_equal(c.ood_adapt(0), first)


def test_lockstep_training_matches_sequential(blobs):
    tr, _ = blobs
    layout = mlp_layout([6, 5, 4])
    rng = np.random.default_rng(2)
    shards = [ClientShard(i, rng.choice(len(tr), size=n, replace=False)) for i, n in enumerate((20, 45, 33))]
    masks = np.stack([mk.random_mask(layout.total_params, 0.5, i) for i in range(3)])
    starts = np.stack([init_kaiming(layout, i) for i in range(3)]) * masks
    steps = [4, 9, 0]
    fresh = lambda: [EpochSampler(s, np.random.default_rng(s.client_id)) for s in shards]
    got = local_train_many(starts, layout, tr, fresh(), masks, steps, 0.1, 5e-4, 8)
    for i, sampler in enumerate(fresh()):
        want = local_train(starts[i], layout, tr, sampler, masks[i], steps[i], 0.1, 5e-4, 8)
        np.testing.assert_allclose(got[i], want, rtol=1e-10, atol=1e-13)
        assert np.all(got[i][~masks[i]] == 0.0)
    assert np.array_equal(got[2], starts[2])
