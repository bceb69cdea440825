import math

import numpy as np
import pytest

from mixrec.config import TrainConfig
from mixrec.dataset import InteractionDataset, build_graph, sample_batch, synthetic_block_dataset
from mixrec.encoder import encode, load_matrix
from mixrec.mixing import assemble_views, sample_coefficients
from mixrec.trainer import (OptimizerState, adam_step, compute_gradients, load_checkpoint, objective_at,
                            save_checkpoint, train, xavier_init)

import oracles
from conftest import random_dataset

GRAD_FLAGS = [{}, {"no_dmcl_user": True}, {"no_dmcl_item": True}, {"no_im": True}, {"no_cm": True},
              {"mix_neg_count": 3}, {"cm_per_anchor": True}, {"main_beta_scalar": True}, {"reg_full_table": True},
              {"include_layer0": True}]


def gradient_instance(seed, **flags):
    """Analytic and finite-difference gradients on one small random instance."""
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 8, 8)
    graph = build_graph(ds)
    cfg = TrainConfig(embed_dim=4, layers=2, batch_size=4, tau=0.2, alpha=0.1, lambda1=0.5, lambda2=1e-4, **flags)
    table = rng.normal(size=(16, 4))
    triplets = sample_batch(ds, 4, rng)
    coeffs = sample_coefficients(4, cfg.mix_params(), rng)
    mix = assemble_views(triplets, coeffs, encode(graph, table, 2, cfg.include_layer0), 8)
    grad = compute_gradients(mix, graph, table, cfg)
    loss_cfg = cfg.loss_config()

    def f(t):
        return objective_at(t, graph, triplets, coeffs, 8, 2, loss_cfg, cfg.include_layer0).l_total

    return grad, oracles.central_difference(f, table)


def max_relative_error(grad, fd):
    mask = np.abs(grad) > 1e-8
    return float(np.max(np.abs(grad - fd)[mask] / np.maximum(np.abs(grad), np.abs(fd))[mask]))


def test_xavier_bounds_and_moments():
    table = xavier_init(400, 100, seed=3)
    bound = math.sqrt(6 / 500)
    assert np.all(np.abs(table) <= bound)
    assert abs(table.mean()) < 0.01 * bound
    assert table.var() == pytest.approx(bound ** 2 / 3, rel=0.02)
    np.testing.assert_array_equal(table, xavier_init(400, 100, seed=3))
    assert not np.array_equal(table, xavier_init(400, 100, seed=4))
    with pytest.raises(ValueError):
        xavier_init(0, 4, seed=0)


def test_xavier_dtype():
    assert xavier_init(3, 2, 0, np.float32).dtype == np.float32


def test_adam_zero_gradient_is_noop():
    table = np.arange(6.0).reshape(3, 2)
    state = OptimizerState.like(table)
    adam_step(state, table, np.zeros_like(table))
    np.testing.assert_array_equal(table, np.arange(6.0).reshape(3, 2))
    assert state.step == 1


def test_adam_first_step_is_sign_times_rate(rng):
    table = rng.normal(size=(4, 3))
    grad = rng.normal(size=(4, 3))
    before = table.copy()
    state = OptimizerState.like(table, TrainConfig(learning_rate=0.01))
    adam_step(state, table, grad)
    # step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    np.testing.assert_allclose(before - table, 0.01 * np.sign(grad), rtol=1e-6)


def test_adam_matches_scalar_recurrence(rng):
    table = rng.normal(size=5)
    grads = rng.normal(size=(4, 5))
    state = OptimizerState.like(table)
    ref = table.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, g in enumerate(grads, start=1):
        adam_step(state, table, g)
        for k in range(5):
            m[k] = 0.9 * m[k] + 0.1 * g[k]
            v[k] = 0.999 * v[k] + 0.001 * g[k] ** 2
            ref[k] -= 0.001 * (m[k] / (1 - 0.9 ** t)) / (math.sqrt(v[k] / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(table, ref, rtol=0, atol=1e-14)


def test_adam_shape_mismatch():
    table = np.zeros((2, 2))
    with pytest.raises(ValueError, match="shape"):
        adam_step(OptimizerState.like(table), table, np.zeros(4))


@pytest.mark.parametrize("flags", GRAD_FLAGS, ids=lambda f: ",".join(f) or "full")
def test_gradient_matches_finite_differences(flags):
    for seed in range(3):
        grad, fd = gradient_instance(seed, **flags)
        assert max_relative_error(grad, fd) < 1e-4


def test_unreachable_nodes_get_no_graph_gradient():
    # user 3 and item 3 form an island that never enters the batch
    train = np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 0], [2, 2], [3, 3]])
    ds = InteractionDataset.from_indexed(4, 4, train, np.zeros((0, 2)))
    graph = build_graph(ds)
    rng = np.random.default_rng(0)
    cfg = TrainConfig(embed_dim=3, layers=2, lambda2=0.0)
    table = rng.normal(size=(8, 3))
    triplets = np.array([[0, 1, 2], [1, 2, 0], [2, 2, 1]])
    coeffs = sample_coefficients(3, cfg.mix_params(), rng)
    mix = assemble_views(triplets, coeffs, encode(graph, table, 2), 4)
    grad = compute_gradients(mix, graph, table, cfg)
    np.testing.assert_array_equal(grad[[3, 7]], 0.0)
    assert np.any(grad[:3] != 0)


def test_edge_visit_counts(small_graph):
    ds, graph = small_graph
    cfg = TrainConfig(embed_dim=4, layers=3, batch_size=16, max_epochs=2, patience=0, eval_every=100)
    result = train(ds, cfg, graph)
    steps = result.steps
    assert steps == 2 * math.ceil(len(ds.train) / 16)
    assert result.edge_visits["forward"] == steps * 2 * graph.num_edges * 3
    assert result.edge_visits["backward"] == steps * 2 * graph.num_edges * 3


def test_zero_epochs_returns_initial_table(small_graph):
    ds, graph = small_graph
    cfg = TrainConfig(embed_dim=4, max_epochs=0)
    result = train(ds, cfg, graph)
    assert result.steps == 0 and result.log == []
    init_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    np.testing.assert_array_equal(result.table, xavier_init(ds.num_nodes, 4, init_seq))


@pytest.fixture(scope="module")
def block():
    return synthetic_block_dataset(seed=0)


def test_loss_decreases(block):
    cfg = TrainConfig(batch_size=512, embed_dim=32, learning_rate=0.005, max_epochs=5, patience=0, eval_every=100,
                      lambda1=0.01)
    log = train(block, cfg).log
    assert log[-1]["total_loss"] < log[0]["total_loss"]


def test_early_stopping_keeps_best_table(block):
    cfg = TrainConfig(batch_size=512, embed_dim=16, learning_rate=0.05, lambda1=0.3, max_epochs=30, patience=2)
    records = []
    result = train(block, cfg, epoch_log=records.append)
    recalls = [r["recall20"] for r in records]
    assert len(records) < 30
    assert result.best_epoch == int(np.argmax(recalls)) + 1
    assert len(records) == result.best_epoch + 2
    assert result.best_metrics["recall"] == max(recalls)
    from mixrec.evaluation import evaluate
    again = evaluate(result.table, build_graph(block), block, 20, cfg.layers)
    assert again.mean_recall == result.best_metrics["recall"]
    assert [r["best_so_far"] for r in records] == list(np.maximum.accumulate(recalls))


def test_epoch_record_keys(small_graph):
    ds, graph = small_graph
    records = []
    train(ds, TrainConfig(embed_dim=4, max_epochs=1, topn=5), graph, epoch_log=records.append)
    assert list(records[0]) == ["epoch", "total_loss", "recall5", "ndcg5", "elapsed_s", "best_so_far"]


def test_step_log_fields(small_graph):
    ds, graph = small_graph
    steps = []
    train(ds, TrainConfig(embed_dim=4, max_epochs=1, batch_size=8), graph, step_log=steps.append)
    assert [s["step"] for s in steps] == list(range(1, len(steps) + 1))
    for s in steps:
        assert s["total"] == pytest.approx(s["main"] + 0.3 * (s["cl_user"] + s["cl_item"]) + 1e-4 * s["reg"])


def test_deterministic_runs(small_graph, tmp_path):
    ds, graph = small_graph
    cfg = TrainConfig(embed_dim=4, max_epochs=3, batch_size=8, deterministic=True)
    a, b = train(ds, cfg, graph), train(ds, cfg, graph)
    assert a.log == b.log
    np.testing.assert_array_equal(a.table, b.table)
    save_checkpoint(tmp_path / "a.mxemb", a.table, cfg, a.steps)
    save_checkpoint(tmp_path / "b.mxemb", b.table, cfg, b.steps)
    assert (tmp_path / "a.mxemb").read_bytes() == (tmp_path / "b.mxemb").read_bytes()
    table, sidecar = load_checkpoint(tmp_path / "a.mxemb")
    np.testing.assert_array_equal(table, a.table)
    assert sidecar["steps"] == a.steps and sidecar["config"]["embed_dim"] == 4
    np.testing.assert_array_equal(load_matrix(tmp_path / "b.mxemb"), b.table)


def test_seed_changes_run(small_graph):
    ds, graph = small_graph
    a = train(ds, TrainConfig(embed_dim=4, max_epochs=1, seed=1), graph)
    b = train(ds, TrainConfig(embed_dim=4, max_epochs=1, seed=2), graph)
    assert not np.array_equal(a.table, b.table)


def test_single_anchor_dataset_is_usable():
    # a one-interaction dataset still trains: the contrastive terms are skipped
    ds = InteractionDataset.from_indexed(1, 2, [[0, 0]], [[0, 1]])
    result = train(ds, TrainConfig(embed_dim=4, max_epochs=2, batch_size=4))
    assert result.steps == 2 and np.all(np.isfinite(result.table))
