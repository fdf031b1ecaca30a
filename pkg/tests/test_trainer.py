import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from metaclust import autodiff as ad
from metaclust.evaluation import bruteforce_best, modularity_metric
from metaclust.graph import synth_sbm
from metaclust.trainer import (
    Problem,
    TrainConfig,
    init_state,
    load_checkpoint,
    normalize_variant,
    sample_disjoint_batches,
    save_checkpoint,
    train,
    train_step,
    unweighted_batch_loss,
    weighted_batch_loss,
)


@pytest.fixture(scope="module")
def small():
    return synth_sbm(10, 3, 0.5, 0.05, attr_dim=4, attr_signal=1.5, rng_seed=2)


def tiny_config(**kw):
    base = dict(n_clusters=3, batch_size=5, min_epochs=3, max_epochs=6, patience=2,
                hidden=6, meta_hidden=4, z_dim=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------ batches


def test_batches_partition_when_tight():
    a, b = sample_disjoint_batches(4, 2, np.random.default_rng(0))
    assert sorted(np.r_[a, b].tolist()) == [0, 1, 2, 3]


def test_batches_deterministic_and_disjoint():
    x = sample_disjoint_batches(50, 10, np.random.default_rng(7))
    y = sample_disjoint_batches(50, 10, np.random.default_rng(7))
    assert all(np.array_equal(p, q) for p, q in zip(x, y))
    assert not set(x[0]) & set(x[1])
    with pytest.raises(ValueError):
        sample_disjoint_batches(5, 3, np.random.default_rng(0))


def test_batch_membership_is_uniform():
    n, b, draws = 20, 4, 10_000
    rng = np.random.default_rng(3)
    counts = np.zeros(n)
    for _ in range(draws):
        counts[sample_disjoint_batches(n, b, rng)[0]] += 1
    p = b / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma + 1)


# ------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(variant="bogus")
    assert normalize_variant("MetaGC-A") == "metagc_a"
    for bad in (dict(batch_size=20), dict(n_clusters=1), dict(lr_meta=0.0), dict(patience=0)):
        with pytest.raises(ValueError):
            tiny_config(**bad).validate(30)


def test_config_hash_changes_with_fields():
    assert tiny_config().config_hash() == tiny_config().config_hash()
    assert tiny_config().config_hash() != tiny_config(lam=0.5).config_hash()


# -------------------------------------------------------------------- steps


def collect(events):
    def hook(name, payload):
        events.append((name, payload))

    return hook


def test_step_order_uses_pre_step_w_and_post_step_theta(small):
    problem = Problem.build(small, tiny_config())
    state = init_state(problem)
    events = []
    for _ in range(3):
        train_step(state, problem, np.random.default_rng(0), hook=collect(events))
    names = [n for n, _ in events]
    assert names == ["meta_update", "cluster_update"] * 3
    for (_, meta), (_, clus) in zip(events[::2], events[1::2]):
        assert np.array_equal(meta["w"], clus["w_before"])
        assert np.array_equal(meta["theta_after"], clus["theta"])
        assert not np.array_equal(meta["theta_before"], meta["theta_after"])
        assert not set(meta["batch_c"]) & set(meta["batch_m"])


def test_zero_meta_rate_is_plain_sgd(small):
    cfg = tiny_config(lr_meta=0.0, optimizer="sgd", lr_cluster=0.05)
    problem = Problem.build(small, cfg)
    state = init_state(problem)
    theta0, w0 = state.theta.flatten(), state.w.detached()
    rng = np.random.default_rng(4)
    b_c, _ = sample_disjoint_batches(problem.n_nodes, cfg.batch_size, np.random.default_rng(4))
    expected = w0.flatten() - 0.05 * ad.grad(
        lambda w: weighted_batch_loss(problem, w, state.theta.detached(), b_c), w0
    ).flatten()
    train_step(state, problem, rng)
    assert np.array_equal(state.theta.flatten(), theta0)
    assert np.allclose(state.w.flatten(), expected, atol=1e-12)


def test_zero_cluster_rate_stalls_everything(small):
    problem = Problem.build(small, tiny_config(lr_cluster=0.0))
    state = init_state(problem)
    w0, th0 = state.w.flatten(), state.theta.flatten()
    train_step(state, problem, np.random.default_rng(0))
    assert np.array_equal(state.w.flatten(), w0)
    assert np.array_equal(state.theta.flatten(), th0)


def test_meta_update_direction_matches_finite_differences():
    ds = synth_sbm(5, 2, 0.8, 0.1, attr_dim=2, rng_seed=1)
    cfg = TrainConfig(n_clusters=2, batch_size=3, hidden=3, meta_hidden=2, z_dim=2,
                      optimizer="sgd", lr_meta=1.0, lr_cluster=0.5)
    problem = Problem.build(ds, cfg)
    state = init_state(problem)
    events = []
    w0, th0 = state.w.detached(), state.theta.detached()
    train_step(state, problem, np.random.default_rng(11), hook=collect(events))
    meta = events[0][1]
    step = meta["theta_before"] - meta["theta_after"]  # = lr_meta * meta-gradient
    b_c, b_m = meta["batch_c"], meta["batch_m"]
    err = ad.meta_finite_diff_check(
        lambda w, th: weighted_batch_loss(problem, w, th, b_c),
        lambda w: unweighted_batch_loss(problem, w, b_m),
        w0, th0, cfg.lr_cluster, epsilon=1e-5,
    )
    assert err <= 1e-3
    g = ad.meta_grad(
        lambda w, th: weighted_batch_loss(problem, w, th, b_c),
        lambda w: unweighted_batch_loss(problem, w, b_m), w0, th0, cfg.lr_cluster,
    )
    assert np.allclose(step, g.flatten(), atol=1e-12)


def test_meta_free_variant_skips_meta_update(small):
    problem = Problem.build(small, tiny_config(variant="metagc-x"))
    state = init_state(problem)
    events = []
    train_step(state, problem, np.random.default_rng(0), hook=collect(events))
    assert [n for n, _ in events] == ["cluster_update"]


# -------------------------------------------------------------------- train


def test_training_is_deterministic(small):
    a, b = train(small, tiny_config()), train(small, tiny_config())
    assert a.modularity_trace == b.modularity_trace
    assert a.loss_trace == b.loss_trace
    assert np.array_equal(a.edge_weights, b.edge_weights)


def test_report_invariants(small):
    r = train(small, tiny_config())
    assert r.best_modularity == max(r.modularity_trace)
    assert r.modularity_trace[r.best_epoch - 1] == r.best_modularity
    assert r.epochs_run == len(r.modularity_trace)
    assert np.all((r.edge_weights > 0) & (r.edge_weights < 1))
    assert r.best_w.all_finite() and r.best_theta.all_finite()
    x = train(small, tiny_config(variant="metagc_x"))
    assert x.edge_weights is None


def scripted_modularity(monkeypatch, values):
    import metaclust.trainer as tr

    real = tr.evaluate_modularity
    calls = iter(values)

    def fake(problem, w):
        _, p = real(problem, w)
        return next(calls, values[-1]), p

    monkeypatch.setattr(tr, "evaluate_modularity", fake)


def test_patience_stops_after_plateau(small, monkeypatch):
    scripted_modularity(monkeypatch, [0.1, 0.2, 0.3, 0.4, 0.5] + [0.45] * 100)
    r = train(small, tiny_config(variant="metagc_x", min_epochs=1, max_epochs=100, patience=3))
    assert r.best_epoch == 5
    assert r.epochs_run == 8


def test_min_epochs_overrides_patience(small, monkeypatch):
    scripted_modularity(monkeypatch, [0.5] + [0.1] * 100)
    r = train(small, tiny_config(variant="metagc_x", min_epochs=20, max_epochs=100, patience=3))
    assert r.best_epoch == 1 and r.epochs_run == 20


def test_snapshot_reproduces_best(small):
    from metaclust.trainer import evaluate_modularity

    r = train(small, tiny_config())
    mod, _ = evaluate_modularity(Problem.build(small, r.config), r.best_w)
    assert mod == r.best_modularity


def test_planted_blocks_reach_bruteforce_optimum():
    # four disjoint pairs: exact optimum by enumeration over 4^8 assignments
    ds = synth_sbm(2, 4, 1.0, 0.0, attr_dim=4, attr_signal=5.0, rng_seed=0)
    best, _ = bruteforce_best(modularity_metric, ds.graph, 4)
    cfg = TrainConfig(n_clusters=4, batch_size=4, min_epochs=200, max_epochs=400,
                      lr_cluster=5e-3, lr_meta=5e-3, hidden=16, meta_hidden=8, z_dim=8)
    r = train(ds, cfg)
    assert best == pytest.approx(0.75)
    assert r.best_modularity >= best - 0.05


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(small, tmp_path):
    r = train(small, tiny_config())
    path = tmp_path / "ck.json"
    save_checkpoint(r, path)
    cfg, w, th = load_checkpoint(path)
    assert cfg == r.config
    assert np.array_equal(w.flatten(), r.best_w.flatten())
    assert np.array_equal(th.flatten(), r.best_theta.flatten())


def test_checkpoint_rejects_tampering(small, tmp_path):
    r = train(small, tiny_config(max_epochs=3))
    path = tmp_path / "ck.json"
    save_checkpoint(r, path)
    blob = json.loads(path.read_text())
    blob["config"]["lam"] = 2.0
    path.write_text(json.dumps(blob))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(path)
    blob["version"] = 99
    path.write_text(json.dumps(blob))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
