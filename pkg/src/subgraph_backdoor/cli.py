"""Command line entry point: ``subgraph-backdoor <command> ...``.

Exit codes: 0 success, 1 other failures (bad files), 2 configuration
errors, 3 when a target category has no usable trigger.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attacher import write_manifest
from .config import ABLATIONS, ExperimentConfig, load_config
from .defenses import similarity_histogram, write_histogram
from .errors import ConfigError, GraphFormatError, UncoveredCategoryError
from .graph import NodeSplit
from .harness import (build_attack, build_defense, emit_report, generate_sbm, load_reports,
                      run_experiment, split_dataset, training_graph, victim_for)
from .io import load_dataset, save_graph
from .models import save_model

log = logging.getLogger("subgraph_backdoor")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_UNCOVERED = 0, 1, 2, 3

# arms compared in the ablation table, full attack first
ABLATION_ARMS = ((),) + tuple((a,) for a in ABLATIONS)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg = cfg.replace(experiment={"seed": args.seed}, data={"seed": args.seed})
    return cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_split(path):
    g, split = load_dataset(path)
    if split is None:
        raise GraphFormatError(f"{path}: bundle has no split.tsv (run `split` first)")
    return g, split


def _write_reports(reports, path):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def cmd_gen_sbm(args):
    cfg = _config(args)
    d = cfg.data
    g = generate_sbm(d.n_classes, d.n_nodes, d.n_features, d.p_in, d.p_out, d.signal, d.sigma, d.seed)
    save_graph(g, _out(args))
    print(f"wrote {g.num_nodes} nodes, {g.num_edges} edges to {args.out_dir}")


def cmd_split(args):
    g, _ = load_dataset(args.data)
    split = split_dataset(g, 0 if args.seed is None else args.seed)
    save_graph(g, _out(args), split)
    print(" ".join(f"{role}={len(nodes)}" for role, nodes in split.sets().items()))


def cmd_attack(args):
    cfg = _config(args)
    g, split = _require_split(args.data)
    n_classes = int(g.labels.max()) + 1
    g_tr, local, _ = training_graph(g, split)
    attack = build_attack(cfg, cfg.experiment.seed)
    if attack is None:
        raise ConfigError("attack command needs experiment.attack = eumc or sba")
    attack.fit(g_tr, local, n_classes)
    out = _out(args)
    g_b = attack.backdoored_graph_
    empty = np.zeros(0, dtype=np.int64)
    train = attack.train_nodes_
    unlabeled = np.setdiff1d(np.arange(g_b.num_nodes),
                             np.concatenate([train, local.labeled_val, local.labeled_test]))
    b_split = NodeSplit(train, local.labeled_val, local.labeled_test, unlabeled, empty, empty)
    save_graph(g_b, out / "backdoored", b_split)
    write_manifest(attack.poisoning_plans_, out / "attachments.jsonl")
    if hasattr(attack, "pool_"):
        attack.pool_.save(out / "pool")
        hist = [{"iter": h["iter"], "loss_a": h["loss_a"], "loss_h": h["loss_h"]} for h in attack.history_]
        (out / "history.json").write_text(json.dumps(hist))
    print(f"poisoned {len(attack.poisoned_nodes_)} nodes; backdoored graph has {g_b.num_nodes} nodes")


def cmd_defend(args):
    cfg = _config(args)
    g, split = load_dataset(args.data)
    defense = build_defense(cfg, cfg.experiment.seed)
    if defense is None:
        raise ConfigError("defend command needs experiment.defense other than none")
    g_d = defense.fit_transform(g)
    out = _out(args)
    save_graph(g_d, out, split)
    (out / "defense_report.json").write_text(defense.report_.to_json())
    print(json.dumps(defense.report_.summary(), sort_keys=True))


def cmd_train(args):
    cfg = _config(args)
    g, split = _require_split(args.data)
    n_classes = int(g.labels.max()) + 1
    out = _out(args)
    for arch in cfg.experiment.archs:
        train = split.labeled_train[g.labels[split.labeled_train] >= 0]
        val = split.labeled_val[g.labels[split.labeled_val] >= 0]
        model = victim_for(cfg, arch, n_classes, cfg.experiment.seed).fit(g, train, val)
        save_model(model, out / f"{arch}.gdmw")
        print(f"{arch}: best validation accuracy {model.best_val_accuracy_}")


def cmd_eval(args):
    cfg = _config(args)
    graph = load_dataset(args.data)[0] if args.data else None
    reports = run_experiment(cfg, graph=graph)
    _write_reports(reports, _out(args) / "reports.jsonl")
    for r in reports:
        asr = "-" if r.asr_avg is None else f"{r.asr_avg:.3f}"
        print(f"{r.arch}: asr {asr} clean accuracy {r.clean_accuracy:.3f}")


def cmd_report(args):
    text = emit_report(load_reports(args.reports), fmt=args.format,
                       path=None if args.out is None else Path(args.out))
    print(text, end="")


def cmd_ablate(args):
    cfg = _config(args)
    graph = load_dataset(args.data)[0] if args.data else None
    reports = []
    for arm in ABLATION_ARMS:
        arm_cfg = cfg.replace(experiment={"attack": "eumc", "ablations": arm})
        reports.extend(run_experiment(arm_cfg, graph=graph))
    out = _out(args)
    _write_reports(reports, out / "reports.jsonl")
    print(emit_report(reports, fmt="markdown", path=out / "ablation.md"), end="")


def cmd_simhist(args):
    g, _ = load_dataset(args.data)
    if g.origin is None:
        raise GraphFormatError(f"{args.data}: bundle has no origin.tsv, nothing marks trigger nodes")
    rows = similarity_histogram(g, bins=args.bins)
    write_histogram(rows, _out(args) / "similarity.csv")
    print(f"wrote {len(rows)} bins")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subgraph-backdoor",
                                     description="Multi-category subgraph backdoor attacks on GNNs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, data=None, out=True, help=None):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out-dir", required=True)
        if data == "required":
            p.add_argument("--data", required=True, help="dataset bundle directory")
        elif data == "optional":
            p.add_argument("--data", help="dataset bundle directory (default: generate the configured SBM)")
        p.set_defaults(func=fn)
        return p

    add("gen-sbm", cmd_gen_sbm, help="generate a synthetic block-model dataset bundle")
    add("split", cmd_split, data="required", help="write an inductive node split into a bundle")
    add("attack", cmd_attack, data="required", help="build the trigger pool and backdoored graph")
    add("defend", cmd_defend, data="required", help="apply the configured defense to a bundle")
    add("train", cmd_train, data="required", help="train victim models on a split bundle")
    add("eval", cmd_eval, data="optional", help="run the full pipeline and write reports.jsonl")
    add("ablate", cmd_ablate, data="optional", help="run every ablation arm next to the full attack")
    p = add("simhist", cmd_simhist, data="required", help="edge-similarity histogram CSV")
    p.add_argument("--bins", type=int, default=20)
    p = sub.add_parser("report", help="aggregate reports.jsonl files into a table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UncoveredCategoryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNCOVERED
    except (GraphFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
