"""Multi-category trigger pool built from attachment probability shifts."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacher import LinkMode, plan_attachment
from .graph import Graph, attach_many
from .io import read_matrix, write_matrix

log = logging.getLogger(__name__)

APS_THRESHOLD = 0.2


@dataclass(eq=False)
class SubgraphTrigger:
    nodes: np.ndarray                        # source ids in the graph it was sampled from
    edges: np.ndarray                        # local (i, j) pairs
    features: np.ndarray = field(repr=False)  # trainable rows, one per trigger node
    aps: np.ndarray = field(repr=False)
    category: int = -1

    @property
    def score(self) -> float:
        return float(np.max(self.aps))

    @property
    def size(self) -> int:
        return self.features.shape[0]


class TriggerPool:
    """Per-category trigger lists, each sorted by descending score."""

    def __init__(self, n_classes, n_pool, lists=None):
        self.n_classes = int(n_classes)
        self.n_pool = int(n_pool)
        self.lists = {c: list((lists or {}).get(c, [])) for c in range(self.n_classes)}

    def size(self, category) -> int:
        return len(self.lists.get(int(category), []))

    def get(self, category, index) -> SubgraphTrigger:
        return self.lists[int(category)][int(index)]

    def stacked(self, category) -> np.ndarray:
        trigs = self.lists.get(int(category), [])
        if not trigs:
            return np.zeros((0, 0, 0))
        return np.stack([t.features for t in trigs])

    @property
    def uncovered(self) -> list:
        return [c for c in range(self.n_classes) if not self.lists[c]]

    def triggers(self):
        """``(category, index, trigger)`` in canonical order."""
        for c in range(self.n_classes):
            for j, t in enumerate(self.lists[c]):
                yield c, j, t

    def feature_params(self) -> list:
        return [t.features for _, _, t in self.triggers()]

    def copy(self) -> TriggerPool:
        return copy.deepcopy(self)

    def validate(self, threshold=None) -> None:
        for c in range(self.n_classes):
            trigs = self.lists[c]
            if len(trigs) > self.n_pool:
                raise ValueError(f"category {c} holds {len(trigs)} > n_pool triggers")
            scores = [t.score for t in trigs]
            if scores != sorted(scores, reverse=True):
                raise ValueError(f"category {c} is not sorted by score")
            for t in trigs:
                if t.category != c:
                    raise ValueError(f"trigger in list {c} targets {t.category}")
                if threshold is not None and not t.score > threshold:
                    raise ValueError(f"trigger score {t.score} not above threshold")
                if not np.all(np.isfinite(t.features)):
                    raise ValueError("non-finite trigger features")

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        for c, j, t in self.triggers():
            name = f"trigger_{c}_{j}.bin"
            write_matrix(path / name, t.features)
            entries.append({
                "category": c, "index": j, "nodes": t.nodes.tolist(), "edges": t.edges.tolist(),
                "aps": [float(a) for a in t.aps], "score": t.score, "features": name,
            })
        manifest = {"n_classes": self.n_classes, "n_pool": self.n_pool,
                    "uncovered": self.uncovered, "triggers": entries}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path) -> TriggerPool:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        pool = cls(manifest["n_classes"], manifest["n_pool"])
        for e in sorted(manifest["triggers"], key=lambda e: (e["category"], e["index"])):
            pool.lists[e["category"]].append(SubgraphTrigger(
                np.array(e["nodes"], dtype=np.int64),
                np.array(e["edges"], dtype=np.int64).reshape(-1, 2),
                read_matrix(path / e["features"]),
                np.array(e["aps"]),
                e["category"],
            ))
        return pool


def compute_aps(model, g: Graph, candidate, poisoned, tau_a, mode=LinkMode.THRESHOLD, base_probs=None):
    """Mean change of ``model``'s class probabilities on ``poisoned`` when the
    candidate is attached to every poisoned node at once."""
    poisoned = np.asarray(poisoned, dtype=np.int64)
    if poisoned.size == 0:
        raise ValueError("empty poisoned node set")
    if base_probs is None:
        base_probs = model.predict_proba(g, poisoned)
    conns = [plan_attachment(candidate.features, g.features[v], tau_a, mode)[0] for v in poisoned]
    attached, _ = attach_many(g, poisoned, [candidate] * len(poisoned), conns)
    after = model.predict_proba(attached, poisoned)
    return (after - base_probs).mean(axis=0)


def filter_and_assign(candidates, aps_vectors, threshold=APS_THRESHOLD) -> list:
    """Keep candidates whose largest APS entry exceeds ``threshold``; target
    category is that entry's index (lowest index on ties)."""
    out = []
    for cand, aps in zip(candidates, aps_vectors):
        aps = np.asarray(aps, dtype=np.float64)
        if aps.max() > threshold:
            out.append(SubgraphTrigger(
                np.asarray(cand.nodes).copy(), np.asarray(cand.edges).copy(),
                np.array(cand.features, dtype=np.float64, copy=True), aps.copy(), int(np.argmax(aps)),
            ))
    return out


def build_pool(triggers, n_classes, n_pool) -> TriggerPool:
    """Top-``n_pool`` triggers per category by score (stable on ties)."""
    pool = TriggerPool(n_classes, n_pool)
    for c in range(n_classes):
        members = [t for t in triggers if t.category == c]
        order = sorted(range(len(members)), key=lambda i: -members[i].score)
        pool.lists[c] = [members[i] for i in order[:n_pool]]
        if len(pool.lists[c]) < n_pool:
            log.warning("category %d: only %d of %d triggers", c, len(pool.lists[c]), n_pool)
    return pool
