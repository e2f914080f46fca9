"""Experiment orchestration: data, splits, attack, defense, victims, metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import SubgraphBackdoor
from .baselines import SBABackdoor
from .config import ExperimentConfig
from .defenses import OutlierNodeFilter, make_defense, similarity_summary
from .graph import Graph, NodeSplit, induced_subgraph
from .io import load_dataset
from .models import GNNClassifier

log = logging.getLogger(__name__)


def generate_sbm(n_classes=4, n_nodes=400, n_features=16, p_in=0.005, p_out=0.0001,
                 signal=0.35, sigma=0.1, seed=0) -> Graph:
    """Stochastic block model with block-indicator features.

    Class ``c`` nodes get ``signal`` on feature block ``c`` (the feature
    dimensions split into ``n_classes`` equal blocks) plus N(0, sigma²)
    noise. Features are rounded to float32 so bundles round-trip exactly.
    """
    if n_features < n_classes:
        raise ValueError("need at least one feature dimension per class")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_nodes // n_classes)
    labels = np.concatenate([labels, np.arange(n_nodes - len(labels))])
    iu, ju = np.triu_indices(n_nodes, k=1)
    same = labels[iu] == labels[ju]
    keep = rng.random(len(iu)) < np.where(same, p_in, p_out)
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    block = n_features // n_classes
    x = sigma * rng.standard_normal((n_nodes, n_features))
    for c in range(n_classes):
        x[labels == c, c * block:(c + 1) * block] += signal
    x = x.astype(np.float32).astype(np.float64)
    return Graph.from_edges(n_nodes, edges, x, labels)


def split_dataset(g: Graph, seed=0, mask_frac=0.2, label_frac=0.2) -> NodeSplit:
    """Hold out ``mask_frac`` of nodes (half target, half clean); label
    ``label_frac`` of the rest and divide those 50/25/25 into train/val/test."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.num_nodes)
    n_mask = int(round(mask_frac * g.num_nodes))
    n_target = n_mask // 2
    target, clean, rest = perm[:n_target], perm[n_target:n_mask], perm[n_mask:]
    n_lab = int(round(label_frac * len(rest)))
    n_train = int(round(0.5 * n_lab))
    n_val = int(round(0.25 * n_lab))
    lab = rest[:n_lab]
    s = NodeSplit(*(np.sort(a) for a in (
        lab[:n_train], lab[n_train:n_train + n_val], lab[n_train + n_val:], rest[n_lab:], target, clean)))
    s.validate(g.num_nodes)
    return s


def training_graph(g: Graph, split: NodeSplit):
    """Induced training graph with labels kept only on labeled nodes, and the
    split expressed in its local ids."""
    sub, ids = induced_subgraph(g, split.training_nodes)
    local = split.localize(ids)
    labels = np.full(sub.num_nodes, -1, dtype=np.int64)
    lab = np.concatenate([local.labeled_train, local.labeled_val, local.labeled_test])
    labels[lab] = sub.labels[lab]
    return sub.with_labels(labels), local, ids


def _defend_test_graph(defense, g, host):
    if defense is None:
        return g
    if isinstance(defense, OutlierNodeFilter):
        return defense.transform(g, protect=[host])
    return defense.transform(g)


def compute_asr(victim, base_graph: Graph, attack, targets, n_classes, defense=None) -> np.ndarray:
    """Per-category attack success rate.

    For every category ``k`` and target node ``v`` the category trigger is
    attached to ``v`` on a fresh copy of ``base_graph`` (after the fitted
    test-time defense, if any) and a hit is counted when ``v`` is predicted
    as ``k``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("no target nodes")
    rates = np.zeros(n_classes)
    for k in range(n_classes):
        hits = 0
        for v in targets:
            attached, _ = attack.transform(base_graph, [v], [k])
            attached = _defend_test_graph(defense, attached, v)
            hits += int(victim.predict(attached, [v])[0] == k)
        rates[k] = hits / len(targets)
    return rates


def compute_clean_accuracy(victim, g: Graph, nodes, labels=None, defense=None) -> float:
    g_eval = g if defense is None else (
        defense.transform(g, protect=nodes) if isinstance(defense, OutlierNodeFilter) else defense.transform(g))
    labels = g.labels if labels is None else labels
    nodes = np.asarray(nodes, dtype=np.int64)
    return float(np.mean(victim.predict(g_eval, nodes) == labels[nodes]))


@dataclass
class EvalReport:
    arch: str
    seed: int
    attack: str
    defense: str
    ablations: list
    asr_per_category: list | None
    asr_avg: float | None
    clean_accuracy: float
    clean_baseline_accuracy: float
    defense_summary: dict | None
    similarity: dict
    n_poisoned: int
    uncovered: list
    config_hash: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def load_graph_for(cfg: ExperimentConfig) -> Graph:
    d = cfg.data
    if d.path:
        g, _ = load_dataset(d.path)
        return g
    return generate_sbm(d.n_classes, d.n_nodes, d.n_features, d.p_in, d.p_out, d.signal, d.sigma, d.seed)


def build_attack(cfg: ExperimentConfig, seed):
    a, abl = cfg.attack, set(cfg.experiment.ablations)
    if cfg.experiment.attack == "sba":
        return SBABackdoor(n_poison=a.n_poison, trigger_size=a.trigger_size, p_edge=a.p_edge, seed=seed)
    if cfg.experiment.attack == "none":
        return None
    link = "all" if "link-all" in abl else "one" if "link-one" in abl else "threshold"
    return SubgraphBackdoor(
        n_poison=a.n_poison, n_pool=a.n_pool, trigger_size=a.trigger_size, n_candidates=a.n_candidates,
        aps_threshold=a.aps_threshold, tau_a=a.tau_a, tau_l=a.tau_l, alpha=a.alpha,
        inner_steps=a.inner_steps, outer_iters=a.outer_iters, hidden=a.hidden,
        surrogate_lr=a.surrogate_lr, trigger_lr=a.trigger_lr, weight_decay=a.weight_decay,
        clean_epochs=a.clean_epochs, target_sample=a.target_sample, patience=a.patience,
        link_mode=link, random_selection="w/o-sele" in abl, random_structure="w/o-stru" in abl,
        random_features="w/o-feat" in abl, random_target="w/o-tgt" in abl, cluster_on=a.cluster_on,
        seed=seed,
    )


def build_defense(cfg: ExperimentConfig, seed):
    d = cfg.defense
    return make_defense(cfg.experiment.defense, percentile=d.percentile, threshold=d.threshold,
                        ratio=d.od_ratio, weight=d.od_weight, epochs=d.od_epochs, seed=seed)


def victim_for(cfg: ExperimentConfig, arch, n_classes, seed) -> GNNClassifier:
    v = cfg.victim
    return GNNClassifier(arch, hidden=v.hidden, epochs=v.epochs, lr=v.lr, weight_decay=v.weight_decay,
                         dropout=v.dropout, n_classes=n_classes, seed=seed)


@dataclass
class ExperimentState:
    """Intermediate artifacts of one run, kept for inspection and tests."""

    graph: Graph
    split: NodeSplit
    train_graph: Graph
    local_split: NodeSplit
    attack: object
    poisoned_graph: Graph
    defended_graph: Graph
    defense: object
    victims: dict


def run_experiment(cfg: ExperimentConfig, graph: Graph | None = None, return_state=False):
    """One report per architecture for ``cfg.experiment.seed``."""
    cfg.validate()
    seed = cfg.experiment.seed
    g = load_graph_for(cfg) if graph is None else graph
    n_classes = int(g.labels.max()) + 1
    split = split_dataset(g, seed)
    g_tr, local, _ = training_graph(g, split)

    attack = build_attack(cfg, seed)
    if attack is None:
        g_b, train_nodes = g_tr, local.labeled_train
    else:
        attack.fit(g_tr, local, n_classes)
        g_b, train_nodes = attack.backdoored_graph_, attack.train_nodes_

    defense = build_defense(cfg, seed)
    g_d = g_b if defense is None else defense.fit_transform(g_b)
    train_nodes = train_nodes[g_d.labels[train_nodes] >= 0]
    val_nodes = local.labeled_val[g_d.labels[local.labeled_val] >= 0]

    reports, victims = [], {}
    for arch in cfg.experiment.archs:
        victim = victim_for(cfg, arch, n_classes, seed).fit(g_d, train_nodes, val_nodes)
        baseline = victim_for(cfg, arch, n_classes, seed).fit(g_tr, local.labeled_train, local.labeled_val)
        victims[arch] = victim
        if attack is None:
            asr = None
        else:
            asr = compute_asr(victim, g, attack, split.target_eval, n_classes, defense)
        reports.append(EvalReport(
            arch=arch, seed=seed, attack=cfg.experiment.attack, defense=cfg.experiment.defense,
            ablations=sorted(cfg.experiment.ablations),
            asr_per_category=None if asr is None else [float(r) for r in asr],
            asr_avg=None if asr is None else float(np.mean(asr)),
            clean_accuracy=compute_clean_accuracy(victim, g, split.clean_eval, defense=defense),
            clean_baseline_accuracy=compute_clean_accuracy(baseline, g, split.clean_eval),
            defense_summary=None if defense is None else defense.report_.summary(),
            similarity=similarity_summary(g_b),
            n_poisoned=0 if attack is None else len(attack.poisoned_nodes_),
            uncovered=list(getattr(getattr(attack, "initial_pool_", None), "uncovered", [])),
            config_hash=cfg.digest(),
        ))
    if return_state:
        return reports, ExperimentState(g, split, g_tr, local, attack, g_b, g_d, defense, victims)
    return reports


def aggregate(reports) -> list:
    """Mean ASR / clean accuracy per (attack, defense, ablations, arch) over seeds."""
    groups = {}
    for r in reports:
        key = (r.attack, r.defense, tuple(r.ablations), r.arch)
        groups.setdefault(key, []).append(r)
    rows = []
    for (attack, defense, abl, arch), rs in sorted(groups.items()):
        asr = [r.asr_avg for r in rs if r.asr_avg is not None]
        rows.append({
            "attack": attack, "defense": defense, "ablations": "+".join(abl) or "-", "arch": arch,
            "runs": len(rs),
            "asr": float(np.mean(asr)) if asr else None,
            "asr_std": float(np.std(asr)) if asr else None,
            "clean_accuracy": float(np.mean([r.clean_accuracy for r in rs])),
            "clean_baseline_accuracy": float(np.mean([r.clean_baseline_accuracy for r in rs])),
        })
    return rows


def _pct(x):
    return "-" if x is None else f"{100 * x:.1f}"


def emit_report(reports, fmt="markdown", path=None) -> str:
    """Render aggregated rows as CSV or a markdown ``ASR | Clean Accuracy`` table."""
    rows = aggregate(reports)
    if fmt == "csv":
        buf = io.StringIO()
        cols = list(rows[0]) if rows else ["attack", "defense", "ablations", "arch", "runs", "asr",
                                           "asr_std", "clean_accuracy", "clean_baseline_accuracy"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    elif fmt == "markdown":
        lines = ["| attack | defense | ablations | arch | runs | ASR | Clean Accuracy |",
                 "|---|---|---|---|---|---|---|"]
        for r in rows:
            lines.append(f"| {r['attack']} | {r['defense']} | {r['ablations']} | {r['arch']} | {r['runs']} "
                         f"| {_pct(r['asr'])} | {_pct(r['clean_accuracy'])} |")
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def load_reports(paths) -> list:
    out = []
    for p in paths:
        for line in Path(p).read_text().splitlines():
            if line.strip():
                out.append(EvalReport(**json.loads(line)))
    return out
