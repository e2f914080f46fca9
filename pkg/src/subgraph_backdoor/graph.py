"""Undirected attributed graphs in CSR form and the mutations the attack needs.

Graphs are immutable: every mutation returns a new instance. Node ids are dense
and 0-based; attached trigger nodes are appended at the tail so that index sets
over pre-existing nodes stay valid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

# origin rows are (category, pool_index, instance_id); original nodes carry -1s
ORIGINAL = -1


@dataclass(frozen=True, eq=False)
class Graph:
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    origin: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels=None, origin=None):
        """Build a graph from an undirected edge list.

        Duplicate edges and self-loops are dropped; each edge may be given in
        either direction (or both).
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        canon = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(edges) else edges
        indptr, indices = _csr_from_undirected(num_nodes, canon)
        features = np.array(features, dtype=np.float64, copy=True).reshape(num_nodes, -1)
        if labels is not None:
            labels = np.array(labels, dtype=np.int64, copy=True)
        if origin is not None:
            origin = np.array(origin, dtype=np.int64, copy=True).reshape(num_nodes, 3)
        g = cls(indptr, indices, features, labels, origin)
        g.validate()
        return g

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @cached_property
    def origin_tags(self) -> np.ndarray:
        if self.origin is None:
            return np.full((self.num_nodes, 3), ORIGINAL, dtype=np.int64)
        return self.origin

    @property
    def trigger_mask(self) -> np.ndarray:
        return self.origin_tags[:, 2] != ORIGINAL

    @cached_property
    def edges(self) -> np.ndarray:
        """Canonical edge list: one ``(u, v)`` row per edge with ``u < v``,
        sorted lexicographically. Row position is the edge id."""
        rows = np.repeat(np.arange(self.num_nodes), self.degree)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.num_nodes,) * 2)

    @cached_property
    def normalized_adjacency(self) -> sp.csr_matrix:
        return normalize_adjacency(self)

    @cached_property
    def mean_adjacency(self) -> sp.csr_matrix:
        """Row-normalized adjacency (neighbor mean); isolated rows are zero."""
        deg = self.degree.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.csr_matrix(sp.diags(inv) @ self.adjacency)

    @cached_property
    def self_loop_adjacency(self) -> sp.csr_matrix:
        """Structure of A + I with sorted column indices per row."""
        a = sp.csr_matrix(self.adjacency + sp.identity(self.num_nodes, format="csr"))
        a.sort_indices()
        return a

    def with_labels(self, labels) -> Graph:
        labels = None if labels is None else np.array(labels, dtype=np.int64, copy=True)
        return Graph(self.indptr, self.indices, self.features, labels, self.origin)

    def with_features(self, features) -> Graph:
        features = np.array(features, dtype=np.float64, copy=True)
        return Graph(self.indptr, self.indices, features, self.labels, self.origin)

    def validate(self) -> None:
        n = self.num_nodes
        if np.any(np.diff(self.indptr) < 0) or self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise ValueError("malformed CSR offsets")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError("neighbor id out of range")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must have {n} rows, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature")
        if self.labels is not None and self.labels.shape != (n,):
            raise ValueError("labels length must equal num_nodes")
        if self.origin is not None and self.origin.shape != (n, 3):
            raise ValueError("origin must have shape (num_nodes, 3)")
        rows = np.repeat(np.arange(n), self.degree)
        if np.any(rows == self.indices):
            raise ValueError("self-loops are not stored")
        a = self.adjacency
        if (a != a.T).nnz:
            raise ValueError("adjacency is not symmetric")

    def equals(self, other: Graph) -> bool:
        same = (
            np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.origin_tags, other.origin_tags)
        )
        if (self.labels is None) != (other.labels is None):
            return False
        return same and (self.labels is None or np.array_equal(self.labels, other.labels))


def _csr_from_undirected(num_nodes, canon):
    src = np.concatenate([canon[:, 0], canon[:, 1]])
    dst = np.concatenate([canon[:, 1], canon[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=indptr[1:])
    return indptr, dst.astype(np.int64)


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetrically normalized adjacency with self-loops, D^-1/2 (A + I) D^-1/2."""
    a = g.adjacency + sp.identity(g.num_nodes, format="csr")
    inv_sqrt = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    d = sp.diags(inv_sqrt)
    return sp.csr_matrix(d @ a @ d)


def cosine(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def row_cosines(a, b) -> np.ndarray:
    """Cosine between matching rows of ``a`` and ``b``; zero-norm rows give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    num = np.sum(a * b, axis=-1)
    out = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return np.clip(out, -1.0, 1.0)


def edge_cosines(g: Graph, edges=None) -> np.ndarray:
    edges = g.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return row_cosines(g.features[edges[:, 0]], g.features[edges[:, 1]])


def attach_many(g: Graph, hosts, triggers, connect_to, tags=None):
    """Attach one trigger instance per host in a single rebuild.

    ``triggers[i]`` needs ``edges`` (local index pairs) and ``features``
    (rows per trigger node). ``connect_to[i]`` lists local trigger node ids
    that get an edge to ``hosts[i]``. ``tags[i]`` is ``(category,
    pool_index)`` for the origin table. Returns the new graph and, per
    attachment, the global ids of the appended nodes.
    """
    n = g.num_nodes
    if not (len(hosts) == len(triggers) == len(connect_to)):
        raise ValueError("hosts, triggers and connect_to must align")
    tags = [(ORIGINAL, ORIGINAL)] * len(hosts) if tags is None else tags
    next_instance = int(g.origin_tags[:, 2].max(initial=ORIGINAL)) + 1

    new_edges = [g.edges]
    new_feats = [g.features]
    new_origin = [g.origin_tags]
    id_maps = []
    offset = n
    for i, (host, trig, conn) in enumerate(zip(hosts, triggers, connect_to)):
        host = int(host)
        if not 0 <= host < offset:
            raise ValueError(f"host {host} does not exist")
        conn = np.unique(np.asarray(conn, dtype=np.int64))
        feats = np.asarray(trig.features, dtype=np.float64)
        size = feats.shape[0]
        if conn.size == 0:
            raise ValueError("attach at least one trigger node (connect_to is empty)")
        if conn.min() < 0 or conn.max() >= size:
            raise ValueError("connect_to outside trigger node set")
        ids = np.arange(offset, offset + size)
        internal = np.asarray(trig.edges, dtype=np.int64).reshape(-1, 2)
        new_edges.append(ids[internal])
        new_edges.append(np.stack([np.full(conn.size, host), ids[conn]], axis=1))
        new_feats.append(feats)
        cat, idx = tags[i]
        new_origin.append(np.tile([cat, idx, next_instance + i], (size, 1)))
        id_maps.append(ids)
        offset += size

    edges = np.concatenate(new_edges)
    canon = np.stack([edges.min(axis=1), edges.max(axis=1)], axis=1)
    total = offset
    indptr, indices = _csr_from_undirected(total, canon)
    labels = None
    if g.labels is not None:
        labels = np.concatenate([g.labels, np.full(total - n, -1, dtype=np.int64)])
    out = Graph(indptr, indices, np.concatenate(new_feats), labels, np.concatenate(new_origin))
    return out, id_maps


def attach_subgraph(g: Graph, trig, host, connect_to, tag=(ORIGINAL, ORIGINAL)):
    """Attach a single trigger instance to ``host``; see :func:`attach_many`."""
    out, ids = attach_many(g, [host], [trig], [connect_to], [tag])
    return out, ids[0]


def induced_subgraph(g: Graph, nodes: Sequence[int]):
    """Subgraph on ``nodes`` (kept in ascending order) plus the kept ids."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    e = g.edges
    keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0)
    sub_edges = remap[e[keep]]
    indptr, indices = _csr_from_undirected(len(nodes), sub_edges)
    labels = None if g.labels is None else g.labels[nodes].copy()
    origin = None if g.origin is None else g.origin[nodes].copy()
    return Graph(indptr, indices, g.features[nodes].copy(), labels, origin), nodes


def remove_edges(g: Graph, edge_ids) -> Graph:
    """Drop the canonical edges with the given ids."""
    keep = np.ones(g.num_edges, dtype=bool)
    keep[np.asarray(edge_ids, dtype=np.int64)] = False
    indptr, indices = _csr_from_undirected(g.num_nodes, g.edges[keep])
    return Graph(indptr, indices, g.features, g.labels, g.origin)


@dataclass(frozen=True)
class NodeSplit:
    """Disjoint node roles for one experiment, in a single id space."""

    labeled_train: np.ndarray
    labeled_val: np.ndarray
    labeled_test: np.ndarray
    unlabeled: np.ndarray
    target_eval: np.ndarray
    clean_eval: np.ndarray

    ROLES = ("train", "val", "test", "unlabeled", "target", "clean")

    def sets(self):
        return dict(zip(self.ROLES, (
            self.labeled_train, self.labeled_val, self.labeled_test,
            self.unlabeled, self.target_eval, self.clean_eval,
        )))

    @property
    def training_nodes(self) -> np.ndarray:
        """Nodes of the training graph (everything not held out for evaluation)."""
        return np.sort(np.concatenate([
            self.labeled_train, self.labeled_val, self.labeled_test, self.unlabeled,
        ]))

    def validate(self, num_nodes=None) -> None:
        seen = np.concatenate(list(self.sets().values()))
        if len(np.unique(seen)) != len(seen):
            raise ValueError("node roles overlap")
        if num_nodes is not None and len(seen) and (seen.min() < 0 or seen.max() >= num_nodes):
            raise ValueError("split refers to nodes outside the graph")

    def localize(self, node_ids) -> NodeSplit:
        """Re-express the training-graph roles in the ids of an induced subgraph
        built from ``node_ids``; evaluation roles become empty."""
        remap = {int(v): i for i, v in enumerate(node_ids)}

        def conv(a):
            return np.array([remap[int(v)] for v in a], dtype=np.int64)

        empty = np.zeros(0, dtype=np.int64)
        return NodeSplit(conv(self.labeled_train), conv(self.labeled_val),
                         conv(self.labeled_test), conv(self.unlabeled), empty, empty)
