import numpy as np
import pytest

from mixrec.dataset import InteractionDataset, build_graph
from mixrec.mixing import MixParams, assemble_views, sample_coefficients


def random_dataset(rng, num_users=8, num_items=8, density=0.35, test_density=0.0):
    """Random bipartite train set where every node has degree >= 1."""
    hits = rng.random((num_users, num_items)) < density
    for u in range(num_users):
        if not hits[u].any():
            hits[u, rng.integers(num_items)] = True
    for i in range(num_items):
        if not hits[:, i].any():
            hits[rng.integers(num_users), i] = True
    test = np.argwhere(~hits & (rng.random((num_users, num_items)) < test_density))
    return InteractionDataset.from_indexed(num_users, num_items, np.argwhere(hits), test)


def random_mix(rng, batch=4, dim=3, num_users=6, num_items=6, params=None):
    """A MixBatch over a random readout matrix, returned with that matrix."""
    params = params or MixParams(alpha=0.5)
    final = rng.normal(size=(num_users + num_items, dim))
    triplets = np.stack([rng.integers(0, num_users, batch), rng.integers(0, num_items, batch),
                         rng.integers(0, num_items, batch)], axis=1)
    coeffs = sample_coefficients(batch, params, rng)
    return assemble_views(triplets, coeffs, final, num_users), final


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph(rng):
    ds = random_dataset(rng)
    return ds, build_graph(ds)
