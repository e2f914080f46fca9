"""Select-then-attach: pick the most host-similar trigger of a category and
decide which of its nodes get an edge to the host."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import UncoveredCategoryError
from .graph import Graph, attach_many, row_cosines


class LinkMode(str, Enum):
    THRESHOLD = "threshold"   # argmax node plus every node with cos > tau_a
    ALL = "all"
    ONE = "one"


@dataclass(frozen=True)
class AttachmentPlan:
    host: int
    category: int
    pool_index: int
    connect_to: tuple
    scores: tuple = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "host": self.host, "category": self.category, "pool_index": self.pool_index,
            "connected_local_ids": list(self.connect_to), "scores": [float(s) for s in self.scores],
        })


def selection_scores(stacked, x_host, reduce="sum") -> np.ndarray:
    """Similarity of each trigger in ``stacked`` (n_triggers, size, d) to the host.

    ``reduce="sum"`` adds the per-row cosines; ``"mean"`` averages them.
    """
    cos = row_cosines(stacked, np.broadcast_to(x_host, stacked.shape))
    return cos.sum(axis=1) if reduce == "sum" else cos.mean(axis=1)


def select_trigger(pool, category, x_host, reduce="sum"):
    """Index and score of the category's trigger most similar to ``x_host``;
    ties go to the lowest pool index."""
    stacked = pool.stacked(category)
    if stacked.shape[0] == 0:
        raise UncoveredCategoryError([category])
    s = selection_scores(stacked, np.asarray(x_host, dtype=np.float64), reduce)
    j = int(np.argmax(s))
    return j, float(s[j])


def plan_attachment(trigger_features, x_host, tau_a, mode=LinkMode.THRESHOLD):
    """Local ids to connect: the most similar node, plus (``threshold``) every
    node with cosine strictly above ``tau_a``. Returns ``(connect_to, cosines)``."""
    feats = np.asarray(trigger_features, dtype=np.float64)
    cos = row_cosines(feats, np.broadcast_to(x_host, feats.shape))
    mode = LinkMode(mode)
    if mode is LinkMode.ALL:
        conn = np.arange(len(feats))
    elif mode is LinkMode.ONE:
        conn = np.array([int(np.argmax(cos))])
    else:
        conn = np.union1d([int(np.argmax(cos))], np.flatnonzero(cos > tau_a))
    return tuple(int(c) for c in conn), cos


def plan_many(features, pool, hosts, categories, tau_a, mode=LinkMode.THRESHOLD,
              random_selection=False, rng=None, reduce="sum"):
    """Plans for many (host, category) pairs; ``features`` is indexed by host id.

    With ``random_selection`` the trigger is drawn uniformly from the
    category list instead of by similarity.
    """
    missing = {int(c) for c in categories if pool.size(c) == 0}
    if missing:
        raise UncoveredCategoryError(missing)
    stacks = {}
    plans = []
    for host, cat in zip(hosts, categories):
        host, cat = int(host), int(cat)
        if cat not in stacks:
            stacks[cat] = pool.stacked(cat)
        stacked = stacks[cat]
        x = features[host]
        if random_selection:
            j = int(rng.integers(stacked.shape[0]))
        else:
            j = int(np.argmax(selection_scores(stacked, x, reduce)))
        conn, cos = plan_attachment(stacked[j], x, tau_a, mode)
        plans.append(AttachmentPlan(host, cat, j, conn, tuple(float(c) for c in cos)))
    return plans


def apply_plans(g: Graph, pool, plans):
    """Attach every plan's trigger (current features) in one rebuild.

    Returns the new graph and, per plan, the global ids of its trigger nodes.
    """
    trigs = [pool.get(p.category, p.pool_index) for p in plans]
    return attach_many(
        g, [p.host for p in plans], trigs, [p.connect_to for p in plans],
        [(p.category, p.pool_index) for p in plans],
    )


def attach(g: Graph, pool, host, category, tau_a, mode=LinkMode.THRESHOLD):
    """Select, plan and attach a category trigger to a single host."""
    (plan,) = plan_many(g.features, pool, [host], [category], tau_a, mode)
    out, _ = apply_plans(g, pool, [plan])
    return out, plan


def write_manifest(plans, path) -> None:
    with open(path, "w") as fh:
        for p in plans:
            fh.write(p.to_json() + "\n")


def read_manifest(path) -> list:
    plans = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                plans.append(AttachmentPlan(d["host"], d["category"], d["pool_index"],
                                            tuple(d["connected_local_ids"]), tuple(d["scores"])))
    return plans
