import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixrec.config import TrainConfig
from mixrec.dataset import InteractionDataset, build_graph
from mixrec.evaluation import (ABLATIONS, RankingResult, evaluate, evaluate_scores, format_ablation_table,
                               ndcg_at_n, rank_items, recall_at_n, run_ablations, sparsity_report)

import oracles
from conftest import random_dataset


def test_rank_items_examples():
    assert rank_items([0.9, 0.5, 0.7], n=2) == [0, 2]
    assert rank_items([0.9, 0.5, 0.7], exclude=[0], n=2) == [2, 1]
    assert rank_items([0.3] * 5, n=5) == [0, 1, 2, 3, 4]
    assert rank_items([0.1, 0.2], exclude=[1], n=5) == [0]


def test_recall_examples():
    assert recall_at_n([1, 2, 9, 8], [1, 2, 3, 4]) == 0.5
    assert recall_at_n([5, 6], [1, 2]) == 0.0
    assert recall_at_n([2, 1, 7], [1, 2]) == 1.0
    with pytest.raises(ValueError):
        recall_at_n([1], [])


def test_ndcg_examples():
    value = ndcg_at_n([7, 9, 8], [7, 8], n=20)
    assert value == pytest.approx((1 + 0.5) / (1 + 1 / math.log2(3)), abs=1e-15)
    assert value == pytest.approx(0.91972, abs=5e-6)
    assert ndcg_at_n([3, 4, 1], [3, 4], n=3) == 1.0
    assert ndcg_at_n([1, 2], [5], n=2) == 0.0


def test_single_user_perfect():
    # a second, test-free user keeps item 1 warm
    ds = InteractionDataset.from_indexed(2, 3, [[0, 2], [1, 1], [1, 0]], [[0, 1]])
    scores = np.array([[0.1, 0.9, 5.0], [0.0, 0.0, 0.0]])
    res = evaluate_scores(scores, ds, 20)
    assert res.num_users == 1
    assert res.mean_recall == 1.0 and res.mean_ndcg == 1.0


def tie_heavy(rng, m, n):
    if rng.random() < 0.5:
        return rng.integers(0, 3, size=(m, n)).astype(float)
    return rng.normal(size=(m, n))


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        ds = random_dataset(rng, 30, 30, density=0.15, test_density=0.1)
        scores = tie_heavy(rng, 30, 30)
        n = int(rng.choice([1, 5, 20]))
        res = evaluate_scores(scores, ds, n, keep_topn=True)
        train_items = ds.train_items_by_user()
        test_items = ds.test_items_by_user()
        expected_users = [u for u in range(30) if len(test_items[u]) and ds.user_degree[u]]
        assert res.users.tolist() == expected_users
        for k, u in enumerate(res.users):
            excluded = set(train_items[u].tolist()) | set(np.flatnonzero(ds.item_degree == 0).tolist())
            top = oracles.brute_force_topn(scores[u], excluded, n)
            assert res.topn[k] == top
            rec, nd = oracles.brute_force_metrics(top, test_items[u].tolist(), n)
            assert res.recall[k] == rec
            assert res.ndcg[k] == pytest.approx(nd, abs=0)


def test_users_without_test_items_do_not_move_aggregates(rng):
    ds = random_dataset(rng, 10, 12, test_density=0.2)
    scores = rng.normal(size=(10, 12))
    base = evaluate_scores(scores, ds, 5)
    # one extra user with train data only
    train = np.vstack([ds.train, [[10, 0], [10, 3]]])
    bigger = InteractionDataset.from_indexed(11, 12, train, ds.test)
    more = evaluate_scores(np.vstack([scores, rng.normal(size=(1, 12))]), bigger, 5)
    assert more.num_users == base.num_users
    assert np.array_equal(more.recall, base.recall)


def test_cold_items_never_ranked():
    train = [[0, 0], [1, 1]]
    test = [[0, 2], [1, 2], [0, 1]]
    ds = InteractionDataset.from_indexed(2, 3, train, test)
    res = evaluate_scores(np.array([[0.0, 1.0, 9.0], [5.0, 0.0, 9.0]]), ds, 3, keep_topn=True)
    assert all(2 not in top for top in res.topn)
    assert res.recall.tolist() == [0.5, 0.0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_rescaling_invariance_and_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 12, 15, density=0.2, test_density=0.2)
    scores = rng.normal(size=(12, 15))
    factors = scale * rng.uniform(0.5, 2.0, size=(12, 1))
    a = evaluate_scores(scores, ds, 5, keep_topn=True)
    b = evaluate_scores(scores * factors, ds, 5, keep_topn=True)
    assert a.topn == b.topn
    assert np.array_equal(a.recall, b.recall) and np.array_equal(a.ndcg, b.ndcg)
    assert np.all((a.recall >= 0) & (a.recall <= 1)) and np.all((a.ndcg >= 0) & (a.ndcg <= 1 + 1e-15))
    train_items = ds.train_items_by_user()
    for u, top in zip(a.users, a.topn):
        assert not set(top) & set(train_items[u].tolist())


def test_ndcg_is_one_iff_relevant_on_top(rng):
    for _ in range(50):
        rel = rng.choice(10, size=int(rng.integers(1, 5)), replace=False).tolist()
        perm = rng.permutation(10).tolist()
        value = ndcg_at_n(perm[:5], rel, 5)
        on_top = set(perm[:min(5, len(rel))]) <= set(rel)
        assert (value == pytest.approx(1.0)) == on_top


def test_evaluate_uses_readout_inner_product(small_graph, rng):
    ds = random_dataset(rng, 8, 8, test_density=0.3)
    graph = build_graph(ds)
    table = rng.normal(size=(16, 3))
    res = evaluate(table, graph, ds, 3, layers=2)
    a = oracles.dense_adjacency(ds.train.tolist(), 8, 8)
    layers = oracles.dense_layers(a, table, 2)
    final = layers[1] + layers[2]
    ref = evaluate_scores(final[:8] @ final[8:].T, ds, 3)
    assert res.mean_recall == ref.mean_recall and res.mean_ndcg == ref.mean_ndcg
    assert res.to_json() == {"recall@3": res.mean_recall, "ndcg@3": res.mean_ndcg, "users": res.num_users}


def fake_result(users, recall=None):
    users = np.asarray(users)
    recall = np.zeros(len(users)) if recall is None else np.asarray(recall, dtype=float)
    return RankingResult(20, users, recall, recall.copy())


def test_sparsity_equal_degrees():
    train = [[u, i] for u in range(8) for i in range(3)]
    ds = InteractionDataset.from_indexed(8, 3, train, [])
    groups = sparsity_report(ds, fake_result(range(8)))
    assert [len(g) for g in groups.groups] == [2, 2, 2, 2]
    assert groups.interactions == [6, 6, 6, 6]


def test_sparsity_mass_balance(rng):
    degree = rng.integers(1, 20, size=60)
    train = [[u, i] for u in range(60) for i in range(int(degree[u]))]
    ds = InteractionDataset.from_indexed(60, 20, train, [])
    recall = rng.random(60)
    groups = sparsity_report(ds, fake_result(range(60), recall))
    total = int(degree.sum())
    for mass in groups.interactions:
        assert abs(mass - total / 4) <= degree.max()
    means = [degree[g].mean() for g in groups.groups]
    assert means[0] <= means[-1]
    assert sorted(np.concatenate(groups.groups).tolist()) == list(range(60))
    for g, (rec, _) in zip(groups.groups, groups.results):
        assert rec == pytest.approx(recall[g].mean())
    lines = groups.to_csv().splitlines()
    assert lines[0] == "group,users,interactions,recall,ndcg" and len(lines) == 5
    by_users = sparsity_report(ds, fake_result(range(60)), by="users")
    assert [len(g) for g in by_users.groups] == [15, 15, 15, 15]
    with pytest.raises(ValueError):
        sparsity_report(ds, fake_result(range(60)), by="items")


def test_ablation_roster_and_determinism(small_graph):
    ds = random_dataset(np.random.default_rng(3), 10, 10, test_density=0.2)
    assert set(ABLATIONS) == {"full", "w/o-DMCL-user", "w/o-DMCL-item", "w/o-IM", "w/o-DM"}
    cfg = TrainConfig(embed_dim=4, batch_size=8, max_epochs=2, deterministic=True)
    rows = run_ablations(ds, cfg)
    assert list(rows) == list(ABLATIONS)
    assert len(format_ablation_table(rows).splitlines()) == 6
    only = run_ablations(ds, cfg, variants=["w/o-IM"])
    assert list(only) == ["full", "w/o-IM"]
    assert only["full"] == rows["full"]
    with pytest.raises(ValueError, match="unknown"):
        run_ablations(ds, cfg, variants=["w/o-X"])


@pytest.mark.slow
def test_full_model_not_beaten_by_any_variant():
    from test_acceptance import SYNTHETIC
    from mixrec.dataset import synthetic_block_dataset
    per_seed = []
    for seed in range(5):
        ds = synthetic_block_dataset(seed=seed)
        per_seed.append(run_ablations(ds, TrainConfig(seed=seed, **SYNTHETIC), graph=build_graph(ds)))
    medians = {name: tuple(float(np.median([rows[name][k] for rows in per_seed])) for k in (0, 1))
               for name in ABLATIONS}
    print(format_ablation_table(medians))
    for name, (recall, _) in medians.items():
        assert medians["full"][0] >= recall, (name, medians)
