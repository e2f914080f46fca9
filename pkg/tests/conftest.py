import numpy as np
import pytest

from subgraph_backdoor.graph import Graph
from subgraph_backdoor.pool import SubgraphTrigger, TriggerPool


def random_graph(rng, n, d, p=0.35, k=None, connected=True):
    """Small random graph; with ``connected`` a random spanning path is added."""
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = [np.stack([iu[keep], ju[keep]], axis=1)]
    if connected and n > 1:
        perm = rng.permutation(n)
        edges.append(np.stack([perm[:-1], perm[1:]], axis=1))
    labels = None if k is None else rng.integers(k, size=n)
    return Graph.from_edges(n, np.concatenate(edges), rng.standard_normal((n, d)), labels)


def random_pool(rng, n_classes, per_class, size, d, p_edge=0.5):
    pool = TriggerPool(n_classes, per_class)
    for c in range(n_classes):
        for _ in range(per_class):
            iu = np.stack(np.triu_indices(size, k=1), axis=1)
            edges = iu[rng.random(len(iu)) < p_edge].reshape(-1, 2)
            aps = np.full(n_classes, -0.3 / max(n_classes - 1, 1))
            aps[c] = 0.3
            pool.lists[c].append(SubgraphTrigger(np.arange(size), edges, rng.standard_normal((size, d)),
                                                 aps, c))
    return pool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
