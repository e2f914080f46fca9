"""Surrogate/trigger alternating optimization.

The inner problem trains a GCN surrogate on the clean training nodes plus the
poisoned nodes (triggers attached, target labels). The outer step moves the
trigger feature rows to make attached nodes land in their target class while
keeping host-trigger edges feature-similar.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attacher import LinkMode, apply_plans, plan_many
from .errors import UncoveredCategoryError
from .graph import Graph, row_cosines
from .models import GCN

log = logging.getLogger(__name__)


@dataclass
class BilevelConfig:
    alpha: float = 5.0
    tau_l: float = 0.6
    tau_a: float = 0.2
    inner_steps: int = 5
    outer_iters: int = 200
    surrogate_lr: float = 0.01
    trigger_lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 64
    target_sample: int = 256
    patience: int = 20
    link_mode: str = LinkMode.THRESHOLD.value
    random_selection: bool = False
    cold_restart: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.tau_l <= 1.0:
            raise ValueError("tau_l must be in [0, 1]")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")


def _trigger_index(pool):
    return {(c, j): i for i, (c, j, _) in enumerate(pool.triggers())}


def loss_s(params, clean_graph: Graph, train_nodes, poisoned_graph: Graph, poisoned, targets):
    """Clean-node cross-entropy on the clean graph plus target-label
    cross-entropy of the poisoned nodes on the attached graph.

    Returns the loss and the surrogate weight gradients.
    """
    logits, cache = GCN.forward(params, clean_graph)
    labels = clean_graph.labels
    loss, probs = nx.softmax_xent_forward(logits, labels, train_nodes)
    g = GCN.backward(params, cache, nx.softmax_xent_backward(probs, labels, train_nodes))
    grads = {k: g[k] for k in GCN.param_names}
    poisoned = np.asarray(poisoned, dtype=np.int64)
    if poisoned.size:
        tgt = np.zeros(poisoned_graph.num_nodes, dtype=np.int64)
        tgt[poisoned] = targets
        logits_p, cache_p = GCN.forward(params, poisoned_graph)
        loss_p, probs_p = nx.softmax_xent_forward(logits_p, tgt, poisoned)
        gp = GCN.backward(params, cache_p, nx.softmax_xent_backward(probs_p, tgt, poisoned))
        loss += loss_p
        for k in GCN.param_names:
            grads[k] = grads[k] + gp[k]
    return loss, grads


def loss_a(params, graph: Graph, pool, plans):
    """Mean cross-entropy of each plan's host w.r.t. the plan's category after
    attaching all plans. Returns the loss and per-trigger feature gradients
    (a list aligned with ``pool.feature_params()``; untouched triggers get 0).
    """
    index = _trigger_index(pool)
    grads = [np.zeros_like(f) for f in pool.feature_params()]
    if not plans:
        return 0.0, grads
    attached, id_maps = apply_plans(graph, pool, plans)
    hosts = np.array([p.host for p in plans], dtype=np.int64)
    targets = np.zeros(attached.num_nodes, dtype=np.int64)
    targets[hosts] = [p.category for p in plans]
    logits, cache = GCN.forward(params, attached)
    loss, probs = nx.softmax_xent_forward(logits, targets, hosts)
    dx = GCN.backward(params, cache, nx.softmax_xent_backward(probs, targets, hosts))["X"]
    for p, ids in zip(plans, id_maps):
        grads[index[(p.category, p.pool_index)]] += dx[ids]
    return loss, grads


def loss_h(plans, host_features, pool, tau_l):
    """Sum over host-trigger edges of ``max(0, tau_l - cos(host, trigger node))``.

    ``host_features`` is indexed by host id. The hinge has zero subgradient at
    its kink. Returns the loss and per-trigger feature gradients.
    """
    index = _trigger_index(pool)
    grads = [np.zeros_like(f) for f in pool.feature_params()]
    total = 0.0
    for p in plans:
        x = np.asarray(host_features[p.host], dtype=np.float64)
        trig = pool.get(p.category, p.pool_index)
        conn = np.asarray(p.connect_to, dtype=np.int64)
        y = trig.features[conn]
        cos = row_cosines(y, np.broadcast_to(x, y.shape))
        active = cos < tau_l
        total += float(np.sum(tau_l - cos[active]))
        if not active.any():
            continue
        nxn = np.linalg.norm(x)
        ny = np.linalg.norm(y, axis=1)
        ok = active & (ny > 0) & (nxn > 0)
        if not ok.any():
            continue
        # d cos / d y = x / (|x||y|) - cos * y / |y|^2
        dcos = x[None, :] / (nxn * ny[ok, None]) - cos[ok, None] * y[ok] / (ny[ok, None] ** 2)
        np.add.at(grads[index[(p.category, p.pool_index)]], conn[ok], -dcos)
    return total, grads


def attack_objective(params, graph, pool, target_plans, poison_plans, alpha, tau_l):
    """``loss_a + alpha * loss_h`` with frozen plans, plus its feature gradients."""
    la, ga = loss_a(params, graph, pool, target_plans)
    lh, gh = loss_h(poison_plans, graph.features, pool, tau_l)
    return la + alpha * lh, [a + alpha * h for a, h in zip(ga, gh)], la, lh


@dataclass
class BilevelResult:
    pool: object
    graph: Graph                  # backdoored training graph
    plans: list                   # poisoning plans, one per poisoned node
    poisoned: np.ndarray
    targets: np.ndarray
    train_nodes: np.ndarray       # clean labeled nodes plus poisoned nodes
    surrogate: dict
    history: list = field(default_factory=list)


def _poison_plans(graph, pool, poisoned, targets, cfg, rng):
    return plan_many(graph.features, pool, poisoned, targets, cfg.tau_a, cfg.link_mode,
                     random_selection=cfg.random_selection, rng=rng)


def _plateaued(history, window, rel_tol=1e-3) -> bool:
    """True once the mean objective of the last ``window`` outer iterations
    is no lower than that of the ``window`` before it. The sampled loss_a is
    noisy, so single-iteration comparisons stop far too early."""
    if len(history) < 2 * window:
        return False
    obj = [h["objective"] for h in history[-2 * window:]]
    prev, last = np.mean(obj[:window]), np.mean(obj[window:])
    return bool(last > prev - rel_tol * max(1.0, abs(prev)))


def run_bilevel(graph: Graph, train_nodes, poisoned, candidates, pool, cfg: BilevelConfig,
                n_classes=None) -> BilevelResult:
    """Optimize trigger features against a GCN surrogate, then poison.

    ``graph`` is the clean training graph with labels on ``train_nodes``;
    ``candidates`` are the unlabeled nodes from which loss_a hosts are drawn.
    The pool is optimized in place on a copy and returned in the result.
    """
    pool = pool.copy()
    k = pool.n_classes if n_classes is None else n_classes
    if pool.uncovered:
        raise UncoveredCategoryError(pool.uncovered)
    rng = np.random.default_rng(cfg.seed)
    poisoned = np.asarray(poisoned, dtype=np.int64)
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    candidates = np.setdiff1d(np.asarray(candidates, dtype=np.int64), poisoned)
    targets = rng.integers(k, size=len(poisoned))

    init_rng = np.random.default_rng(rng.integers(2**32))
    params = GCN.init_params(graph.num_features, cfg.hidden, k, init_rng)
    names = list(GCN.param_names)
    s_state = nx.AdamState(lr=cfg.surrogate_lr)
    p_state = nx.AdamState(lr=cfg.trigger_lr)

    history = []
    for it in range(cfg.outer_iters):
        t0 = time.perf_counter()
        if cfg.cold_restart:
            params = GCN.init_params(graph.num_features, cfg.hidden, k, init_rng)
            s_state = nx.AdamState(lr=cfg.surrogate_lr)
        plans_p = _poison_plans(graph, pool, poisoned, targets, cfg, rng)
        g_pois, _ = apply_plans(graph, pool, plans_p)
        for _ in range(cfg.inner_steps):
            ls, gs = loss_s(params, graph, train_nodes, g_pois, poisoned, targets)
            if cfg.weight_decay:
                gs = {n: gs[n] + cfg.weight_decay * params[n] for n in names}
            nx.adam_step([params[n] for n in names], [gs[n] for n in names], s_state)

        m = min(cfg.target_sample, len(candidates))
        hosts = np.sort(rng.choice(candidates, size=m, replace=False))
        cats = rng.integers(k, size=m)
        plans_a = plan_many(graph.features, pool, hosts, cats, cfg.tau_a, cfg.link_mode,
                            random_selection=cfg.random_selection, rng=rng)
        lp, grads, la, lh = attack_objective(params, graph, pool, plans_a, plans_p, cfg.alpha, cfg.tau_l)
        nx.adam_step(pool.feature_params(), grads, p_state)
        history.append({"iter": it, "loss_s": ls, "loss_a": la, "loss_h": lh, "objective": lp,
                        "seconds": time.perf_counter() - t0})

        if cfg.patience and _plateaued(history, cfg.patience):
            log.info("outer loop plateaued after %d iterations", it + 1)
            break

    plans = _poison_plans(graph, pool, poisoned, targets, cfg, rng)
    g_b, _ = apply_plans(graph, pool, plans)
    labels = g_b.labels.copy()
    labels[poisoned] = targets
    g_b = g_b.with_labels(labels)
    return BilevelResult(pool, g_b, plans, poisoned, targets,
                         np.union1d(train_nodes, poisoned), params, history)
