"""Interaction data: loading, splitting, graph construction and triplet sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed or degenerate interaction files."""


@dataclass(frozen=True)
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray  # (n_train, 2) int64, rows are (user, item)
    test: np.ndarray  # (n_test, 2) int64
    user_degree: np.ndarray
    item_degree: np.ndarray
    summary: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("train", "test", "user_degree", "item_degree"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_indexed(cls, num_users, num_items, train, test, summary=None):
        train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
        test = np.asarray(test, dtype=np.int64).reshape(-1, 2)
        user_degree = np.bincount(train[:, 0], minlength=num_users).astype(np.int64)
        item_degree = np.bincount(train[:, 1], minlength=num_items).astype(np.int64)
        return cls(num_users, num_items, train, test, user_degree, item_degree, dict(summary or {}))

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def train_items_by_user(self) -> list[np.ndarray]:
        return _group_items(self.train, self.num_users)

    def test_items_by_user(self) -> list[np.ndarray]:
        return _group_items(self.test, self.num_users)

    def train_keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` codes of the train pairs."""
        return np.sort(self.train[:, 0] * self.num_items + self.train[:, 1])

    def summary_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in self.summary.items()]


def _group_items(pairs: np.ndarray, num_users: int) -> list[np.ndarray]:
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    items = pairs[order, 1]
    bounds = np.searchsorted(pairs[order, 0], np.arange(num_users + 1))
    return [items[bounds[u]:bounds[u + 1]] for u in range(num_users)]


def _read_records(path) -> list[tuple[int, list[int]]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            tokens = text.split()
            try:
                values = [int(tok) for tok in tokens]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed token in {text!r}") from None
            if any(v < 0 for v in values):
                raise DatasetError(f"{path}:{lineno}: negative id in {text!r}")
            # adjacency lines and pair-per-line files share this layout:
            # a two-token line is a user followed by a single item
            records.append((values[0], values[1:]))
    return records


class _Remapper:
    def __init__(self):
        self.index: dict[int, int] = {}

    def __call__(self, raw: int) -> int:
        idx = self.index.get(raw)
        if idx is None:
            idx = self.index[raw] = len(self.index)
        return idx

    def __len__(self):
        return len(self.index)


def _build_from_raw(train_raw, test_raw) -> InteractionDataset:
    """Remap raw (user, item) pair lists densely by first appearance, train before test."""
    users, items = _Remapper(), _Remapper()
    dedup = 0
    seen: set[tuple[int, int]] = set()
    train = []
    for u_raw, i_raw in train_raw:
        pair = (users(u_raw), items(i_raw))
        if pair in seen:
            dedup += 1
            continue
        seen.add(pair)
        train.append(pair)
    if not train:
        raise DatasetError("empty dataset")
    train_users, train_items = len(users), len(items)

    test = []
    test_seen: set[tuple[int, int]] = set()
    overlap = 0
    for u_raw, i_raw in test_raw:
        pair = (users(u_raw), items(i_raw))
        if pair in test_seen:
            dedup += 1
            continue
        if pair in seen:
            overlap += 1
            continue
        test_seen.add(pair)
        test.append(pair)

    cold = (len(users) - train_users) + (len(items) - train_items)
    summary = {
        "users": len(users),
        "items": len(items),
        "train": len(train),
        "test": len(test),
        "dedup": dedup + overlap,
        "cold": cold,
    }
    if cold:
        logger.warning("%d test-only users/items kept with degree 0", cold)
    return InteractionDataset.from_indexed(len(users), len(items), train, test, summary)


def _expand(records):
    return [(u, i) for u, its in records for i in its]


def load_dataset(train_path, test_path) -> InteractionDataset:
    """Load a train/test split from adjacency-list text files.

    Each line holds a raw user id followed by the raw ids of the items it
    interacted with; ``#`` lines are comments. Ids are remapped densely in
    order of first appearance over the train file and then the test file.
    Test-only users and items are kept with degree 0 and counted as ``cold``
    in ``ds.summary``.
    """
    train_raw = _expand(_read_records(train_path))
    test_raw = _expand(_read_records(test_path))
    return _build_from_raw(train_raw, test_raw)


def random_split(pairs, test_fraction: float, seed: int) -> InteractionDataset:
    """Per-user random holdout of ``round(test_fraction * n_u)`` interactions.

    A user always keeps at least one interaction in train.
    """
    pairs = [(int(u), int(i)) for u, i in pairs]
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if test_fraction * len(pairs) < 1:
        raise ValueError("test_fraction * len(pairs) must be at least 1")
    rng = np.random.default_rng(seed)
    by_user: dict[int, list[int]] = {}
    for u, i in pairs:
        bucket = by_user.setdefault(u, [])
        if i not in bucket:
            bucket.append(i)
    train_raw, test_raw = [], []
    for u, its in by_user.items():
        n_test = min(int(round(test_fraction * len(its))), len(its) - 1)
        order = rng.permutation(len(its))
        held = set(order[:n_test].tolist())
        for k, i in enumerate(its):
            (test_raw if k in held else train_raw).append((u, i))
    return _build_from_raw(train_raw, test_raw)


def synthetic_block_dataset(
    num_users=200,
    num_items=300,
    num_blocks=10,
    p_in=0.3,
    p_out=0.01,
    test_fraction=0.2,
    seed=0,
) -> InteractionDataset:
    """Planted-partition interactions: users and items split into equal blocks."""
    rng = np.random.default_rng(seed)
    user_block = np.arange(num_users) * num_blocks // num_users
    item_block = np.arange(num_items) * num_blocks // num_items
    same = user_block[:, None] == item_block[None, :]
    prob = np.where(same, p_in, p_out)
    hits = rng.random((num_users, num_items)) < prob
    # every user needs at least one interaction
    for u in np.flatnonzero(~hits.any(axis=1)):
        hits[u, rng.choice(np.flatnonzero(same[u]))] = True
    users, items = np.nonzero(hits)
    return random_split(zip(users.tolist(), items.tolist()), test_fraction, seed)


@dataclass(frozen=True)
class NormalizedGraph:
    """Symmetric ``D^-1/2 A D^-1/2`` bipartite adjacency, users first then items."""

    adj: sp.csr_matrix
    num_users: int
    num_items: int

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        """Undirected user-item edges; each is stored twice."""
        return self.adj.nnz // 2

    def edge_weight(self, user: int, item: int) -> float:
        return float(self.adj[user, self.num_users + item])


def build_graph(ds: InteractionDataset) -> NormalizedGraph:
    u = ds.train[:, 0]
    i = ds.train[:, 1]
    w = 1.0 / np.sqrt(ds.user_degree[u].astype(np.float64) * ds.item_degree[i].astype(np.float64))
    n = ds.num_nodes
    rows = np.concatenate([u, i + ds.num_users])
    cols = np.concatenate([i + ds.num_users, u])
    adj = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return NormalizedGraph(adj, ds.num_users, ds.num_items)


class NegativeSamplingError(RuntimeError):
    pass


def sample_batch(ds: InteractionDataset, batch_size: int, rng: np.random.Generator, train_keys=None) -> np.ndarray:
    """Uniform (u, i, j) triplets with rejection-sampled negatives.

    ``train_keys`` is the cached result of ``ds.train_keys()``.
    Returns an int64 array of shape (batch_size, 3).
    """
    if len(ds.train) == 0:
        raise NegativeSamplingError("no training interactions")
    keys = ds.train_keys() if train_keys is None else train_keys
    picks = rng.integers(0, len(ds.train), size=batch_size)
    users = ds.train[picks, 0]
    pos = ds.train[picks, 1]
    full = users[ds.user_degree[users] >= ds.num_items]
    if full.size:
        raise NegativeSamplingError(f"user {int(full[0])} interacted with every item; no negative exists")
    neg = rng.integers(0, ds.num_items, size=batch_size)
    pending = np.flatnonzero(_contains(keys, users * ds.num_items + neg))
    limit = 10 * ds.num_items + 100
    for _ in range(limit):
        if not pending.size:
            break
        neg[pending] = rng.integers(0, ds.num_items, size=pending.size)
        still = _contains(keys, users[pending] * ds.num_items + neg[pending])
        pending = pending[still]
    else:
        if pending.size:
            raise NegativeSamplingError(f"user {int(users[pending[0]])}: no negative after {limit} resample rounds")
    return np.stack([users, pos, neg], axis=1)


def _contains(sorted_keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_keys, queries)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == queries
