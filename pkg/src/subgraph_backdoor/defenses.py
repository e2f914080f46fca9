"""Training-graph defenses: similarity pruning, pruning with label discard,
and a reconstruction-error outlier filter (a small DOMINANT-style graph
autoencoder). All are fit/transform estimators that only ever remove.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .graph import Graph, edge_cosines, remove_edges
from .models import GCN, glorot
from .validation import check_fraction, check_graph


@dataclass
class DefenseReport:
    kind: str
    edges_removed: list = field(default_factory=list)
    labels_discarded: list = field(default_factory=list)
    nodes_removed: list = field(default_factory=list)
    trigger_hit_rate: float = 0.0
    threshold: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["n_edges_removed"] = len(self.edges_removed)
        return json.dumps(d, sort_keys=True)

    def summary(self) -> dict:
        return {"kind": self.kind, "edges_removed": len(self.edges_removed),
                "labels_discarded": len(self.labels_discarded), "nodes_removed": len(self.nodes_removed),
                "trigger_hit_rate": self.trigger_hit_rate}


def _edge_trigger_mask(g: Graph, edges) -> np.ndarray:
    tm = g.trigger_mask
    return tm[edges[:, 0]] | tm[edges[:, 1]]


def _hit_rate(removed_mask, trigger_mask) -> float:
    total = int(trigger_mask.sum())
    return float((removed_mask & trigger_mask).sum() / total) if total else 0.0


def prune_edge_ids(g: Graph, percentile=None, threshold=None, inclusive=False) -> np.ndarray:
    """Edge ids to prune: the ``floor(percentile * |E|)`` lowest-cosine edges
    (ties by edge id), or every edge with cosine below ``threshold``."""
    cos = edge_cosines(g)
    if percentile is not None:
        m = int(np.floor(check_fraction(percentile, "percentile", inclusive_high=True) * len(cos) + 1e-9))
        order = np.lexsort((np.arange(len(cos)), cos))
        return np.sort(order[:m])
    if threshold is None:
        raise ValueError("give a percentile or a threshold")
    return np.flatnonzero(cos <= threshold if inclusive else cos < threshold)


class EdgePruner(TransformerMixin, BaseEstimator):
    """Drop edges whose endpoint features are dissimilar.

    ``fit_transform`` on the training graph removes exactly the lowest
    ``percentile`` share of edges (or those below ``threshold``);
    ``threshold_`` is the cut learned there, which ``transform`` applies to
    unseen graphs such as test-time graphs with an attached trigger.
    With ``discard_labels`` the endpoints of pruned edges lose their labels.
    """

    def __init__(self, percentile=0.1, threshold=None, discard_labels=False):
        self.percentile = percentile
        self.threshold = threshold
        self.discard_labels = discard_labels

    def _cut(self, g):
        if self.threshold is not None:
            return prune_edge_ids(g, threshold=self.threshold), float(self.threshold), False
        ids = prune_edge_ids(g, percentile=self.percentile)
        cos = edge_cosines(g)
        return ids, float(cos[ids].max()) if ids.size else -np.inf, True

    def fit(self, g, y=None):
        check_graph(g)
        _, self.threshold_, self.inclusive_ = self._cut(g)
        return self

    def fit_transform(self, g, y=None):
        check_graph(g)
        ids, self.threshold_, self.inclusive_ = self._cut(g)
        return self._apply(g, ids)

    def transform(self, g):
        check_is_fitted(self, "threshold_")
        ids = prune_edge_ids(g, threshold=self.threshold_, inclusive=self.inclusive_)
        return self._apply(g, ids)

    def _apply(self, g, ids):
        edges = g.edges
        removed = np.zeros(len(edges), dtype=bool)
        removed[ids] = True
        out = remove_edges(g, ids)
        discarded = []
        if self.discard_labels and out.labels is not None:
            ends = np.unique(edges[ids].ravel())
            labels = out.labels.copy()
            discarded = [int(v) for v in ends if labels[v] >= 0]
            labels[ends] = -1
            out = out.with_labels(labels)
        self.report_ = DefenseReport(
            "prune+ld" if self.discard_labels else "prune",
            edges_removed=[[int(u), int(v)] for u, v in edges[ids]],
            labels_discarded=discarded,
            trigger_hit_rate=_hit_rate(removed, _edge_trigger_mask(g, edges)),
            threshold=None if not np.isfinite(self.threshold_) else self.threshold_,
        )
        return out


def prune(g, percentile=0.1, threshold=None):
    p = EdgePruner(percentile=None if threshold is not None else percentile, threshold=threshold)
    out = p.fit_transform(g)
    return out, p.report_


def prune_ld(g, percentile=0.1, threshold=None):
    p = EdgePruner(percentile=None if threshold is not None else percentile, threshold=threshold,
                   discard_labels=True)
    out = p.fit_transform(g)
    return out, out.labels, p.report_


def isolate_nodes(g: Graph, nodes) -> Graph:
    """Cut every edge incident to ``nodes`` and drop their labels; ids are kept."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return g
    hit = np.zeros(g.num_nodes, dtype=bool)
    hit[nodes] = True
    e = g.edges
    out = remove_edges(g, np.flatnonzero(hit[e[:, 0]] | hit[e[:, 1]]))
    if out.labels is not None:
        labels = out.labels.copy()
        labels[nodes] = -1
        out = out.with_labels(labels)
    return out


class GraphAutoencoder:
    """GCN encoder with a linear feature decoder and an inner-product
    structure decoder, trained on a weighted squared reconstruction loss."""

    def __init__(self, hidden=64, latent=32, weight=0.5, epochs=100, lr=0.01, seed=0):
        self.hidden = hidden
        self.latent = latent
        self.weight = weight
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def init(self, d):
        rng = np.random.default_rng(self.seed)
        self.params = {"W1": glorot(rng, (d, self.hidden)), "W2": glorot(rng, (self.hidden, self.latent)),
                       "W3": glorot(rng, (self.latent, d))}

    def forward(self, g):
        z, cache = GCN.forward({"W1": self.params["W1"], "W2": self.params["W2"]}, g)
        xhat = z @ self.params["W3"]
        s = 1.0 / (1.0 + np.exp(-(z @ z.T)))
        return z, xhat, s, cache

    def loss_and_grads(self, g):
        n = g.num_nodes
        lam = self.weight
        z, xhat, s, cache = self.forward(g)
        a = g.adjacency.toarray()
        rx = xhat - g.features
        ra = s - a
        loss = lam * np.sum(rx * rx) / n + (1 - lam) * np.sum(ra * ra) / n
        dxhat = 2 * lam * rx / n
        dz, dw3 = nx.matmul_backward(z, self.params["W3"], dxhat)
        dp = (2 * (1 - lam) * ra / n) * s * (1 - s)
        dz = dz + (dp + dp.T) @ z
        enc = GCN.backward({"W1": self.params["W1"], "W2": self.params["W2"]}, cache, dz)
        return loss, {"W1": enc["W1"], "W2": enc["W2"], "W3": dw3}

    def fit(self, g):
        self.init(g.num_features)
        state = nx.AdamState(lr=self.lr)
        names = ["W1", "W2", "W3"]
        self.losses = []
        for _ in range(self.epochs):
            loss, grads = self.loss_and_grads(g)
            nx.adam_step([self.params[k] for k in names], [grads[k] for k in names], state)
            self.losses.append(loss)
        return self

    def scores(self, g) -> np.ndarray:
        """Per node: weight * ||x - x_hat|| + (1 - weight) * ||a - s|| (row norms)."""
        _, xhat, s, _ = self.forward(g)
        a = g.adjacency.toarray()
        feat = np.linalg.norm(g.features - xhat, axis=1)
        struct = np.linalg.norm(a - s, axis=1)
        return self.weight * feat + (1 - self.weight) * struct


class OutlierNodeFilter(TransformerMixin, BaseEstimator):
    """Remove the ``ratio`` share of nodes with the largest reconstruction error.

    Removed nodes are isolated and unlabeled rather than deleted, so node
    ids stay aligned with any split.
    """

    def __init__(self, ratio=0.05, weight=0.5, epochs=100, hidden=64, latent=32, lr=0.01, seed=0):
        self.ratio = ratio
        self.weight = weight
        self.epochs = epochs
        self.hidden = hidden
        self.latent = latent
        self.lr = lr
        self.seed = seed

    def fit(self, g, y=None):
        check_graph(g)
        ratio = check_fraction(self.ratio, "ratio")
        self.autoencoder_ = GraphAutoencoder(self.hidden, self.latent, self.weight, self.epochs,
                                             self.lr, self.seed).fit(g)
        self.scores_ = self.autoencoder_.scores(g)
        m = int(np.floor(ratio * g.num_nodes + 1e-9))
        order = np.lexsort((np.arange(g.num_nodes), -self.scores_))
        self.removed_ = np.sort(order[:m])
        self.threshold_ = float(self.scores_[self.removed_].min()) if m else np.inf
        return self

    def fit_transform(self, g, y=None):
        self.fit(g)
        return self._apply(g, self.removed_)

    def transform(self, g, protect=()):
        check_is_fitted(self, "threshold_")
        scores = self.autoencoder_.scores(g)
        drop = np.flatnonzero(scores >= self.threshold_)
        return self._apply(g, np.setdiff1d(drop, np.asarray(protect, dtype=np.int64)))

    def _apply(self, g, nodes):
        out = isolate_nodes(g, nodes)
        removed = np.zeros(g.num_nodes, dtype=bool)
        removed[nodes] = True
        discarded = [] if g.labels is None else [int(v) for v in nodes if g.labels[v] >= 0]
        self.report_ = DefenseReport(
            "od", nodes_removed=[int(v) for v in nodes], labels_discarded=discarded,
            trigger_hit_rate=_hit_rate(removed, g.trigger_mask),
            threshold=None if not np.isfinite(self.threshold_) else self.threshold_,
        )
        return out


def od_filter(g, ratio=0.05, weight=0.5, epochs=100, seed=0):
    if ratio >= 1.0:
        raise ValueError("ratio must be below 1")
    f = OutlierNodeFilter(ratio=ratio, weight=weight, epochs=epochs, seed=seed)
    out = f.fit_transform(g)
    return out, f.report_


def make_defense(name, **kwargs):
    """Build a defense by config name; ``None``/``"none"`` gives ``None``."""
    if name in (None, "none"):
        return None
    if name == "prune":
        return EdgePruner(percentile=kwargs.get("percentile", 0.1), threshold=kwargs.get("threshold"))
    if name == "prune+ld":
        return EdgePruner(percentile=kwargs.get("percentile", 0.1), threshold=kwargs.get("threshold"),
                          discard_labels=True)
    if name == "od":
        return OutlierNodeFilter(ratio=kwargs.get("ratio", 0.05), weight=kwargs.get("weight", 0.5),
                                 epochs=kwargs.get("epochs", 100), seed=kwargs.get("seed", 0))
    raise ValueError(f"unknown defense {name!r}")


def edge_similarity(g: Graph) -> dict:
    """Cosine of every edge split into clean, trigger (touching a trigger node)
    and connection (exactly one trigger endpoint, i.e. host-trigger) edges."""
    edges = g.edges
    cos = edge_cosines(g)
    tm = g.trigger_mask
    a, b = tm[edges[:, 0]], tm[edges[:, 1]]
    return {"clean": cos[~(a | b)], "trigger": cos[a | b], "connection": cos[a ^ b]}


def similarity_summary(g: Graph) -> dict:
    sims = edge_similarity(g)
    return {f"{k}_mean": float(v.mean()) if v.size else None for k, v in sims.items()} | {
        f"{k}_count": int(v.size) for k, v in sims.items()}


def similarity_histogram(g: Graph, bins=20) -> list:
    """Rows ``(bin_left, clean_count, trigger_count)`` over [-1, 1]."""
    sims = edge_similarity(g)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    clean, _ = np.histogram(sims["clean"], bins=edges)
    trig, _ = np.histogram(sims["trigger"], bins=edges)
    return [(float(edges[i]), int(clean[i]), int(trig[i])) for i in range(bins)]


def write_histogram(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "clean_count", "trigger_count"])
        for r in rows:
            w.writerow([f"{r[0]:.4f}", r[1], r[2]])
