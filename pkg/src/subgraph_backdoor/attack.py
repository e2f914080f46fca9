"""Multi-category subgraph-trigger backdoor as a fit/transform estimator."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attacher import LinkMode, apply_plans, plan_many
from .bilevel import BilevelConfig, run_bilevel
from .errors import UncoveredCategoryError
from .models import GCN, GNNClassifier
from .pool import APS_THRESHOLD, build_pool, compute_aps, filter_and_assign
from .sampling import sample_candidate_pool, select_poisoned_nodes
from .validation import check_graph, check_nodes

log = logging.getLogger(__name__)


def random_structure(size, n_edges, rng) -> np.ndarray:
    """``n_edges`` distinct undirected pairs drawn uniformly among ``size`` nodes."""
    iu = np.stack(np.triu_indices(size, k=1), axis=1)
    pick = np.sort(rng.choice(len(iu), size=min(n_edges, len(iu)), replace=False))
    return iu[pick]


class SubgraphBackdoor(BaseEstimator):
    """Learns a per-category pool of subgraph triggers on a training graph.

    ``fit(graph, split)`` expects the clean training graph (labels present on
    ``split.labeled_train``/``labeled_val``) and runs: clean GCN, k-means
    poisoned-node choice, BFS candidates, APS scoring, pool construction and
    the bi-level optimization. The poisoned training graph is exposed as
    ``backdoored_graph_`` with ``train_nodes_`` as its training set.
    ``transform`` attaches category triggers to hosts of any graph.

    Ablation switches: ``random_structure``/``random_features``/
    ``random_target`` re-randomize the pool after construction;
    ``random_selection`` draws triggers uniformly from the category list;
    ``link_mode`` is ``"threshold"``, ``"all"`` or ``"one"``.
    """

    def __init__(self, n_poison=20, n_pool=40, trigger_size=5, n_candidates=300,
                 aps_threshold=APS_THRESHOLD, tau_a=0.2, tau_l=0.6, alpha=5.0, inner_steps=5,
                 outer_iters=200, hidden=64, surrogate_lr=0.01, trigger_lr=0.01, weight_decay=5e-4,
                 clean_epochs=200, target_sample=256, patience=20, link_mode="threshold",
                 random_selection=False, random_structure=False, random_features=False,
                 random_target=False, cluster_on="embedding", seed=0):
        self.n_poison = n_poison
        self.n_pool = n_pool
        self.trigger_size = trigger_size
        self.n_candidates = n_candidates
        self.aps_threshold = aps_threshold
        self.tau_a = tau_a
        self.tau_l = tau_l
        self.alpha = alpha
        self.inner_steps = inner_steps
        self.outer_iters = outer_iters
        self.hidden = hidden
        self.surrogate_lr = surrogate_lr
        self.trigger_lr = trigger_lr
        self.weight_decay = weight_decay
        self.clean_epochs = clean_epochs
        self.target_sample = target_sample
        self.patience = patience
        self.link_mode = link_mode
        self.random_selection = random_selection
        self.random_structure = random_structure
        self.random_features = random_features
        self.random_target = random_target
        self.cluster_on = cluster_on
        self.seed = seed

    def bilevel_config(self) -> BilevelConfig:
        return BilevelConfig(
            alpha=self.alpha, tau_l=self.tau_l, tau_a=self.tau_a, inner_steps=self.inner_steps,
            outer_iters=self.outer_iters, surrogate_lr=self.surrogate_lr, trigger_lr=self.trigger_lr,
            weight_decay=self.weight_decay, hidden=self.hidden, target_sample=self.target_sample,
            patience=self.patience, link_mode=LinkMode(self.link_mode).value,
            random_selection=self.random_selection, seed=self.seed,
        )

    def fit(self, graph, split, n_classes=None):
        check_graph(graph)
        if graph.labels is None:
            raise ValueError("training graph needs labels")
        cfg = self.bilevel_config()
        rng = np.random.default_rng(self.seed)
        labels = graph.labels
        k = int(n_classes if n_classes is not None else labels[labels >= 0].max() + 1)
        unlabeled = check_nodes(split.unlabeled, graph.num_nodes)

        # the attacker has no use for a held-out set: fit on every labeled
        # node and keep the final epoch (best-epoch snapshots on a handful of
        # validation nodes often stop at an under-confident model)
        self.clean_model_ = GNNClassifier(
            "gcn", hidden=self.hidden, epochs=self.clean_epochs, lr=self.surrogate_lr,
            weight_decay=self.weight_decay, n_classes=k, seed=self.seed,
        ).fit(graph, np.union1d(split.labeled_train, split.labeled_val))

        if self.cluster_on == "embedding":
            emb = GCN.hidden(self.clean_model_.params_, graph)
        elif self.cluster_on == "features":
            emb = graph.features
        else:
            raise ValueError(f"cluster_on must be 'embedding' or 'features', got {self.cluster_on!r}")
        self.poisoned_nodes_ = select_poisoned_nodes(emb, unlabeled, self.n_poison, self.seed)

        candidates = sample_candidate_pool(graph, unlabeled, self.n_candidates, self.trigger_size,
                                           rng.integers(2**32))
        base = self.clean_model_.predict_proba(graph, self.poisoned_nodes_)
        self.aps_ = np.array([
            compute_aps(self.clean_model_, graph, c, self.poisoned_nodes_, self.tau_a, cfg.link_mode, base)
            for c in candidates
        ]).reshape(len(candidates), k)
        triggers = filter_and_assign(candidates, self.aps_, self.aps_threshold)
        if self.random_target:
            for t in triggers:
                t.category = int(rng.integers(k))
        pool = build_pool(triggers, k, self.n_pool)
        self._randomize(pool, graph, rng)
        self.initial_pool_ = pool.copy()
        self.n_classes_ = k
        if pool.uncovered:
            raise UncoveredCategoryError(pool.uncovered)

        res = run_bilevel(graph, split.labeled_train, self.poisoned_nodes_, unlabeled, pool, cfg, k)
        self.pool_ = res.pool
        self.backdoored_graph_ = res.graph
        self.train_nodes_ = res.train_nodes
        self.poisoning_plans_ = res.plans
        self.poison_targets_ = res.targets
        self.surrogate_params_ = res.surrogate
        self.history_ = res.history
        return self

    def _randomize(self, pool, graph, rng):
        if not (self.random_structure or self.random_features):
            return
        mu = graph.features.mean(axis=0)
        sd = graph.features.std(axis=0)
        for _, _, t in pool.triggers():
            if self.random_structure:
                t.edges = random_structure(t.size, len(t.edges), rng)
            if self.random_features:
                t.features = mu + sd * rng.standard_normal(t.features.shape)

    def plan(self, graph, hosts, categories, rng=None):
        check_is_fitted(self, "pool_")
        if self.random_selection and rng is None:
            rng = np.random.default_rng(self.seed)
        return plan_many(graph.features, self.pool_, hosts, categories, self.tau_a,
                         LinkMode(self.link_mode), random_selection=self.random_selection, rng=rng)

    def transform(self, graph, hosts, categories, rng=None):
        """Attach the selected category trigger to each host; returns the new
        graph and the plans."""
        plans = self.plan(graph, hosts, categories, rng)
        out, _ = apply_plans(graph, self.pool_, plans)
        return out, plans
