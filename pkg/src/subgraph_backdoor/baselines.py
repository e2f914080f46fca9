"""SBA baseline: one fixed Erdős–Rényi trigger per category, features copied
from random training-graph rows, attached through a single random edge."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attacher import AttachmentPlan
from .graph import attach_many
from .validation import check_graph, check_nodes


@dataclass(eq=False)
class FixedTrigger:
    edges: np.ndarray
    features: np.ndarray = field(repr=False)
    source_rows: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.features.shape[0]


def erdos_renyi_edges(size, p_edge, rng) -> np.ndarray:
    iu = np.stack(np.triu_indices(size, k=1), axis=1)
    return iu[rng.random(len(iu)) < p_edge].reshape(-1, 2)


class SBABackdoor(BaseEstimator):
    def __init__(self, n_poison=20, trigger_size=5, p_edge=0.3, seed=0):
        self.n_poison = n_poison
        self.trigger_size = trigger_size
        self.p_edge = p_edge
        self.seed = seed

    def fit(self, graph, split, n_classes=None):
        check_graph(graph)
        rng = np.random.default_rng(self.seed)
        labels = graph.labels
        k = int(n_classes if n_classes is not None else labels[labels >= 0].max() + 1)
        self.triggers_ = []
        for _ in range(k):
            edges = erdos_renyi_edges(self.trigger_size, self.p_edge, rng)
            rows = rng.integers(graph.num_nodes, size=self.trigger_size)
            self.triggers_.append(FixedTrigger(edges, graph.features[rows].copy(), rows))
        self.n_classes_ = k

        unlabeled = check_nodes(split.unlabeled, graph.num_nodes)
        self.poisoned_nodes_ = np.sort(rng.choice(unlabeled, size=min(self.n_poison, len(unlabeled)),
                                                  replace=False))
        self.poison_targets_ = rng.integers(k, size=len(self.poisoned_nodes_))
        self.backdoored_graph_, self.poisoning_plans_ = self.transform(
            graph, self.poisoned_nodes_, self.poison_targets_)
        labels = self.backdoored_graph_.labels.copy()
        labels[self.poisoned_nodes_] = self.poison_targets_
        self.backdoored_graph_ = self.backdoored_graph_.with_labels(labels)
        self.train_nodes_ = np.union1d(split.labeled_train, self.poisoned_nodes_)
        return self

    def plan(self, graph, hosts, categories, rng=None):
        check_is_fitted(self, "triggers_")
        plans = []
        for h, c in zip(hosts, categories):
            r = np.random.default_rng([self.seed, int(h), int(c)]) if rng is None else rng
            j = int(r.integers(self.trigger_size))
            plans.append(AttachmentPlan(int(h), int(c), 0, (j,), ()))
        return plans

    def transform(self, graph, hosts, categories, rng=None):
        plans = self.plan(graph, hosts, categories, rng)
        out, _ = attach_many(graph, [p.host for p in plans], [self.triggers_[p.category] for p in plans],
                             [p.connect_to for p in plans], [(p.category, 0) for p in plans])
        return out, plans
