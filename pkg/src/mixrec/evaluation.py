"""All-ranking top-N evaluation, sparsity groups and ablation runs."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .dataset import InteractionDataset, NormalizedGraph
from .encoder import encode


def rank_items(user_scores, exclude=(), n: int = 20) -> list[int]:
    """Top-n non-excluded items by descending score, ties by ascending index."""
    scores = np.asarray(user_scores, dtype=float)
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(list(exclude), dtype=np.int64)] = False
    idx = np.flatnonzero(keep)
    order = np.argsort(-scores[idx], kind="stable")
    return idx[order[:n]].tolist()


def recall_at_n(topn, relevant) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    return len(relevant.intersection(int(t) for t in topn)) / len(relevant)


def _discounts(n):
    return np.array([1.0 / math.log2(p + 2) for p in range(n)])


def ndcg_at_n(topn, relevant, n: int | None = None) -> float:
    """Binary-relevance NDCG with the ideal truncated at ``min(n, |relevant|)``."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    n = len(topn) if n is None else n
    hits = np.array([int(t) in relevant for t in topn[:n]], dtype=float)
    disc = _discounts(max(n, 1))
    dcg = math.fsum(disc[:len(hits)][hits > 0])
    idcg = math.fsum(disc[:min(n, len(relevant))])
    return dcg / idcg


@dataclass
class RankingResult:
    n: int
    users: np.ndarray  # evaluated user indices
    recall: np.ndarray  # per evaluated user
    ndcg: np.ndarray
    topn: list | None = None  # per evaluated user, when requested

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def mean_recall(self) -> float:
        return math.fsum(self.recall) / len(self.recall) if len(self.recall) else 0.0

    @property
    def mean_ndcg(self) -> float:
        return math.fsum(self.ndcg) / len(self.ndcg) if len(self.ndcg) else 0.0

    def to_json(self) -> dict:
        return {f"recall@{self.n}": self.mean_recall, f"ndcg@{self.n}": self.mean_ndcg, "users": self.num_users}

    def to_table(self) -> str:
        rows = [("metric", "value"), (f"recall@{self.n}", f"{self.mean_recall:.6f}"),
                (f"ndcg@{self.n}", f"{self.mean_ndcg:.6f}"), ("users", str(self.num_users))]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{width}}  {b}" for a, b in rows)


def _top_rows(scores: np.ndarray, n: int) -> list[np.ndarray]:
    """Row-wise top-n over finite entries; ties resolved by ascending column."""
    num_cols = scores.shape[1]
    k = min(n, num_cols)
    kth = np.partition(scores, num_cols - k, axis=1)[:, num_cols - k]
    out = []
    for row, thr in zip(scores, kth):
        if not np.isfinite(thr):
            idx = np.flatnonzero(np.isfinite(row))
        else:
            idx = np.flatnonzero(row >= thr)
        order = np.argsort(-row[idx], kind="stable")
        out.append(idx[order[:n]])
    return out


def evaluate_scores(scores: np.ndarray, ds: InteractionDataset, n: int = 20, keep_topn=False,
                    chunk: int = 1024) -> RankingResult:
    """Metrics from a full (M, N) score matrix.

    Train items and zero-degree items are never candidates. Users with no
    train interactions or no test items are skipped.
    """
    train_items = ds.train_items_by_user()
    test_items = ds.test_items_by_user()
    cold_items = ds.item_degree == 0
    users = np.array([u for u in range(ds.num_users) if ds.user_degree[u] > 0 and len(test_items[u])],
                     dtype=np.int64)
    recalls = np.zeros(len(users))
    ndcgs = np.zeros(len(users))
    tops = [] if keep_topn else None
    disc = _discounts(n)
    for start in range(0, len(users), chunk):
        block_users = users[start:start + chunk]
        block = np.array(scores[block_users], dtype=np.float64)
        block[:, cold_items] = -np.inf
        for r, u in enumerate(block_users):
            block[r, train_items[u]] = -np.inf
        for r, top in enumerate(_top_rows(block, n)):
            u = block_users[r]
            rel = test_items[u]
            hits = np.isin(top, rel)
            recalls[start + r] = hits.sum() / len(rel)
            ndcgs[start + r] = math.fsum(disc[:len(top)][hits]) / math.fsum(disc[:min(n, len(rel))])
            if keep_topn:
                tops.append(top.tolist())
    return RankingResult(n, users, recalls, ndcgs, tops)


def score_matrix(final: np.ndarray, num_users: int) -> np.ndarray:
    return final[:num_users] @ final[num_users:].T


def evaluate(table, graph: NormalizedGraph, ds: InteractionDataset, n: int = 20, layers: int = 3,
             include_layer0: bool = False, keep_topn=False) -> RankingResult:
    """Inner-product all-ranking evaluation on readout embeddings."""
    final = encode(graph, np.asarray(table), layers, include_layer0)
    return evaluate_scores(score_matrix(final, ds.num_users), ds, n, keep_topn)


@dataclass
class SparsityGroups:
    groups: list  # 4 arrays of user indices, sparsest first
    interactions: list
    results: list  # (recall, ndcg) per group

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("group,users,interactions,recall,ndcg\n")
        for k, (users, mass, (rec, nd)) in enumerate(zip(self.groups, self.interactions, self.results), start=1):
            buf.write(f"U{k},{len(users)},{mass},{rec:.6f},{nd:.6f}\n")
        return buf.getvalue()


def sparsity_report(ds: InteractionDataset, result: RankingResult, by: str = "interactions",
                    num_groups: int = 4) -> SparsityGroups:
    """Split evaluated users, sorted by train degree, into mass- or count-balanced groups."""
    degree = ds.user_degree[result.users]
    order = np.argsort(degree, kind="stable")
    if by == "interactions":
        mass = degree[order]
        before = np.cumsum(mass) - mass
        total = max(int(mass.sum()), 1)
        label = np.minimum(before * num_groups // total, num_groups - 1)
    elif by == "users":
        label = np.arange(len(order)) * num_groups // max(len(order), 1)
    else:
        raise ValueError(f"unknown grouping {by!r}")
    groups, masses, results = [], [], []
    for g in range(num_groups):
        members = order[label == g]
        groups.append(result.users[members])
        masses.append(int(degree[members].sum()))
        if len(members):
            results.append((math.fsum(result.recall[members]) / len(members),
                            math.fsum(result.ndcg[members]) / len(members)))
        else:
            results.append((0.0, 0.0))
    return SparsityGroups(groups, masses, results)


ABLATIONS = {
    "full": {},
    "w/o-DMCL-user": {"no_dmcl_user": True},
    "w/o-DMCL-item": {"no_dmcl_item": True},
    "w/o-IM": {"no_im": True},
    "w/o-DM": {"no_cm": True},
}


def run_ablations(ds: InteractionDataset, config, variants=None, graph=None) -> dict:
    """Train and evaluate the full model and its ablations under one seed.

    Returns ``{variant: (recall, ndcg)}``; the full model is always included.
    """
    from .trainer import train

    names = list(ABLATIONS) if not variants else ["full"] + [v for v in variants if v != "full"]
    unknown = [v for v in names if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variant(s): {', '.join(unknown)}")
    table = {}
    for name in names:
        result = train(ds, config.replace(**ABLATIONS[name]), graph=graph)
        table[name] = (result.best_metrics["recall"], result.best_metrics["ndcg"])
    return table


def format_ablation_table(rows: dict, n: int = 20) -> str:
    header = ("variant", f"recall@{n}", f"ndcg@{n}")
    lines = [header] + [(k, f"{r:.6f}", f"{g:.6f}") for k, (r, g) in rows.items()]
    width = max(len(line[0]) for line in lines)
    return "\n".join(f"{a:<{width}}  {b:>10}  {c:>10}" for a, b, c in lines)
