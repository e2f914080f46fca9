"""BFS candidate subgraphs and k-means based choice of poisoned nodes."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .graph import Graph


@dataclass(frozen=True, eq=False)
class CandidateSubgraph:
    center: int
    nodes: np.ndarray                      # global ids, nodes[0] == center
    edges: np.ndarray                      # local (i, j) pairs with i < j
    features: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.nodes)


def induced_local_edges(g: Graph, nodes) -> np.ndarray:
    pos = {int(v): i for i, v in enumerate(nodes)}
    out = []
    for i, v in enumerate(nodes):
        for u in g.neighbors(v):
            j = pos.get(int(u))
            if j is not None and i < j:
                out.append((i, j))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


def bfs_sample(g: Graph, center: int, size: int) -> CandidateSubgraph:
    """BFS from ``center`` visiting neighbors in ascending id order, cut at
    ``size`` nodes. A component that runs out early is padded by restarting
    from the unvisited node whose id is closest to ``center``."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if not 0 <= center < g.num_nodes:
        raise ValueError(f"center {center} out of range")
    size = min(size, g.num_nodes)
    visited = {int(center)}
    order = [int(center)]
    queue = deque([int(center)])
    while len(order) < size:
        if not queue:
            rest = np.setdiff1d(np.arange(g.num_nodes), order)
            nxt = int(rest[np.argmin(np.abs(rest - center))])
            visited.add(nxt)
            order.append(nxt)
            queue.append(nxt)
            continue
        v = queue.popleft()
        for u in np.sort(g.neighbors(v)):
            u = int(u)
            if u not in visited:
                visited.add(u)
                order.append(u)
                queue.append(u)
                if len(order) == size:
                    break
    nodes = np.array(order, dtype=np.int64)
    return CandidateSubgraph(int(center), nodes, induced_local_edges(g, nodes), g.features[nodes].copy())


def sample_candidate_pool(g: Graph, centers_from, n_candidates: int, size: int, seed) -> list:
    """BFS candidates around ``n_candidates`` centers drawn without replacement
    from ``centers_from`` (capped at its size)."""
    rng = np.random.default_rng(seed)
    pool = np.asarray(centers_from, dtype=np.int64)
    n = min(int(n_candidates), len(pool))
    centers = rng.choice(pool, size=n, replace=False)
    return [bfs_sample(g, int(c), size) for c in centers]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    history: list
    n_iter: int


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), idx)
            nxt = int(remaining[0]) if remaining.size else int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans(x, k: int, seed=0, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    An empty cluster is reseeded at the point farthest from its current
    centroid. Stops when assignments stop changing or after ``max_iter``.
    ``history`` holds the inertia after each assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise ValueError(f"k must be in 1..{len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assignment = np.full(len(x), -1)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new = d.argmin(axis=1)
        dist = d[np.arange(len(x)), new]
        for c in range(k):
            if not np.any(new == c):
                far = int(dist.argmax())
                new[far] = c
                dist[far] = 0.0
                centroids[c] = x[far]
        history.append(float(dist.sum()))
        if np.array_equal(new, assignment):
            break
        assignment = new
        for c in range(k):
            centroids[c] = x[assignment == c].mean(axis=0)
    inertia = float(((x - centroids[assignment]) ** 2).sum())
    return KMeansResult(centroids, assignment, inertia, history, it)


class KMeans(ClusterMixin, BaseEstimator):
    def __init__(self, n_clusters=8, max_iter=300, seed=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        res = kmeans(X, self.n_clusters, self.seed, self.max_iter)
        self.cluster_centers_ = res.centroids
        self.labels_ = res.assignment
        self.inertia_ = res.inertia
        self.inertia_history_ = res.history
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return _sq_dists(np.asarray(X, dtype=np.float64), self.cluster_centers_).argmin(axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.sqrt(_sq_dists(np.asarray(X, dtype=np.float64), self.cluster_centers_))


def select_poisoned_nodes(embeddings, candidates, k: int, seed=0) -> np.ndarray:
    """One representative per k-means cluster: the candidate nearest its centroid.

    ``embeddings`` is indexed by node id. Clusters that cannot supply a new
    node are backfilled with the next-nearest remaining candidates.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k must be in 1..{len(candidates)}")
    emb = np.asarray(embeddings, dtype=np.float64)[candidates]
    res = kmeans(emb, k, seed)
    dist = np.sqrt(((emb - res.centroids[res.assignment]) ** 2).sum(axis=1))
    chosen = []
    for c in range(k):
        members = np.flatnonzero(res.assignment == c)
        if members.size:
            chosen.append(int(members[np.lexsort((members, dist[members]))[0]]))
    chosen = list(dict.fromkeys(chosen))
    if len(chosen) < k:
        rest = np.setdiff1d(np.arange(len(candidates)), chosen)
        rest = rest[np.lexsort((rest, dist[rest]))]
        chosen.extend(int(r) for r in rest[: k - len(chosen)])
    return np.sort(candidates[chosen])
