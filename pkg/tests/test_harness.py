import json

import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components

from subgraph_backdoor.attack import SubgraphBackdoor
from subgraph_backdoor.config import ExperimentConfig
from subgraph_backdoor.defenses import EdgePruner
from subgraph_backdoor.errors import UncoveredCategoryError
from subgraph_backdoor.graph import Graph
from subgraph_backdoor.harness import (EvalReport, aggregate, compute_asr, compute_clean_accuracy, emit_report,
                                       generate_sbm, load_reports, run_experiment, split_dataset,
                                       training_graph)
from subgraph_backdoor.models import GNNClassifier

from conftest import random_graph, random_pool

FAST = dict(attack=dict(n_pool=10, outer_iters=3), victim=dict(epochs=50))


def test_split_sizes_for_1000_nodes():
    g = generate_sbm(n_nodes=1000, seed=0)
    s = split_dataset(g, 0)
    sizes = {role: len(v) for role, v in s.sets().items()}
    assert sizes["target"] == 100 and sizes["clean"] == 100
    assert len(s.training_nodes) == 800
    assert sizes["train"] + sizes["val"] + sizes["test"] == 160
    assert (sizes["train"], sizes["val"], sizes["test"]) == (80, 40, 40)
    s.validate(1000)


def test_split_is_seeded():
    g = generate_sbm(n_nodes=100, seed=0)
    a, b, c = split_dataset(g, 4), split_dataset(g, 4), split_dataset(g, 5)
    assert all(np.array_equal(a.sets()[r], b.sets()[r]) for r in a.ROLES)
    assert not np.array_equal(a.target_eval, c.target_eval)


def test_training_graph_excludes_eval_nodes():
    g = generate_sbm(n_nodes=200, p_in=0.05, seed=1)
    s = split_dataset(g, 1)
    sub, local, ids = training_graph(g, s)
    assert sub.num_nodes == 160
    held_out = set(s.target_eval.tolist()) | set(s.clean_eval.tolist())
    assert not set(ids.tolist()) & held_out
    assert np.all(sub.labels[local.unlabeled] == -1)
    assert np.array_equal(sub.labels[local.labeled_train], g.labels[s.labeled_train])


def test_sbm_block_edge_counts_within_three_sigma():
    n, k, p_in = 400, 4, 0.1
    g = generate_sbm(k, n, 16, p_in=p_in, p_out=0.01, seed=7)
    nc = n // k
    pairs = nc * (nc - 1) / 2
    mu, sd = pairs * p_in, np.sqrt(pairs * p_in * (1 - p_in))
    e = g.edges
    for c in range(k):
        count = int(np.sum((g.labels[e[:, 0]] == c) & (g.labels[e[:, 1]] == c)))
        assert abs(count - mu) <= 3 * sd


def test_sbm_without_cross_edges_splits_into_blocks():
    g = generate_sbm(4, 200, 8, p_in=0.3, p_out=0.0, seed=2)
    n_comp, comp = connected_components(g.adjacency, directed=False)
    assert n_comp == 4
    for c in range(4):
        assert len(set(comp[g.labels == c].tolist())) == 1


def test_sbm_features():
    g = generate_sbm(2, 40, 4, signal=1.0, sigma=0.0, seed=0)
    np.testing.assert_array_equal(g.features[g.labels == 0][0], [1, 1, 0, 0])
    assert np.array_equal(g.features, g.features.astype(np.float32))
    with pytest.raises(ValueError):
        generate_sbm(8, 40, 4)


class Constant:
    def __init__(self, k):
        self.k = k

    def predict(self, graph, nodes):
        return np.full(len(nodes), self.k)


def _fitted_attack(pool, tau_a=0.2):
    atk = SubgraphBackdoor(tau_a=tau_a)
    atk.pool_ = pool
    return atk


def test_asr_constant_classifier():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 10, 3, k=3)
    atk = _fitted_attack(random_pool(rng, 3, 2, 2, 3))
    rates = compute_asr(Constant(1), g, atk, [2, 5, 7], 3)
    assert rates.tolist() == [0.0, 1.0, 0.0]


def test_asr_surfaces_uncovered_category():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 10, 3, k=2)
    pool = random_pool(rng, 2, 2, 2, 3)
    pool.lists[1] = []
    with pytest.raises(UncoveredCategoryError):
        compute_asr(Constant(0), g, _fitted_attack(pool), [1], 2)


def _oracle_asr(model, g, pool, targets, k, tau_a):
    """Per target and category: pick the trigger by summed cosine, wire it
    up by hand, run a dense GCN, count hits."""
    w1, w2 = model.params_["W1"], model.params_["W2"]
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))  # noqa: E731
    hits = np.zeros(k)
    for c in range(k):
        for v in targets:
            x_v = g.features[v]
            scores = [sum(cos(r, x_v) for r in t.features) for t in pool.lists[c]]
            t = pool.lists[c][int(np.argmax(scores))]
            sims = [cos(r, x_v) for r in t.features]
            conn = {int(np.argmax(sims))} | {j for j, s in enumerate(sims) if s > tau_a}
            n, m = g.num_nodes, len(t.features)
            a = np.eye(n + m)
            for p, q in g.edges.tolist() + [(n + i, n + j) for i, j in t.edges.tolist()] + [(v, n + j) for j in conn]:
                a[p, q] = a[q, p] = 1
            d = 1 / np.sqrt(a.sum(1))
            ahat = a * d[:, None] * d[None, :]
            x = np.vstack([g.features, t.features])
            logits = ahat @ np.maximum(ahat @ x @ w1, 0) @ w2
            hits[c] += int(np.argmax(logits[v]) == c)
    return hits / len(targets)


@pytest.mark.parametrize("seed", range(5))
def test_asr_matches_per_node_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 8, 3, p=0.3, k=3)
    pool = random_pool(rng, 3, 2, 2, 3)
    victim = GNNClassifier("gcn", hidden=5, epochs=20, dropout=0.0, seed=seed).fit(g, np.arange(8))
    targets = [0, 3, 6]
    got = compute_asr(victim, g, _fitted_attack(pool), targets, 3)
    np.testing.assert_array_equal(got, _oracle_asr(victim, g, pool, targets, 3, 0.2))


def test_asr_never_mutates_base_graph():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 10, 3, k=2)
    snapshot = Graph(g.indptr.copy(), g.indices.copy(), g.features.copy(), g.labels.copy())
    compute_asr(Constant(0), g, _fitted_attack(random_pool(rng, 2, 1, 3, 3)), range(10), 2,
                defense=EdgePruner(percentile=0.2).fit(g))
    assert g.equals(snapshot)


def test_clean_accuracy():
    g = Graph.from_edges(4, [], np.zeros((4, 1)), labels=[1, 1, 0, 1])
    assert compute_clean_accuracy(Constant(1), g, [0, 1, 2, 3]) == 0.75


@pytest.fixture(scope="module")
def fast_run():
    cfg = ExperimentConfig().replace(**FAST)
    return cfg, run_experiment(cfg, return_state=True)


def test_run_experiment_report(fast_run):
    cfg, (reports, state) = fast_run
    (r,) = reports
    assert r.arch == "gcn" and r.seed == 0 and r.n_poisoned == 20
    assert r.asr_avg == float(np.mean(r.asr_per_category))
    assert all(0 <= x <= 1 for x in r.asr_per_category + [r.clean_accuracy, r.clean_baseline_accuracy])
    assert r.config_hash == cfg.digest()
    assert not state.graph.trigger_mask.any()
    assert state.poisoned_graph.trigger_mask.sum() == 20 * 5


def test_run_experiment_is_deterministic(fast_run):
    cfg, (reports, _) = fast_run
    again = run_experiment(cfg)
    assert [r.to_json() for r in again] == [r.to_json() for r in reports]


def test_run_experiment_sba_with_prune():
    cfg = ExperimentConfig().replace(experiment=dict(attack="sba", defense="prune", archs=("gcn", "sage")),
                                     victim=dict(epochs=30))
    reports = run_experiment(cfg)
    assert [r.arch for r in reports] == ["gcn", "sage"]
    assert reports[0].defense_summary["kind"] == "prune"


def test_run_experiment_without_attack():
    cfg = ExperimentConfig().replace(experiment=dict(attack="none"), victim=dict(epochs=30))
    (r,) = run_experiment(cfg)
    assert r.asr_avg is None and r.n_poisoned == 0


def _report(arch="gcn", seed=0, asr=0.5, acc=0.9):
    return EvalReport(arch, seed, "eumc", "none", [], [asr, asr], asr, acc, acc, None, {}, 20, [], "h")


def test_aggregate_and_emit(tmp_path):
    reports = [_report(seed=0, asr=0.4), _report(seed=1, asr=0.6), _report(arch="sage")]
    rows = aggregate(reports)
    gcn = next(r for r in rows if r["arch"] == "gcn")
    assert gcn["runs"] == 2 and gcn["asr"] == pytest.approx(0.5)
    md = emit_report(reports, "markdown", tmp_path / "t.md")
    assert md.splitlines()[0].endswith("| ASR | Clean Accuracy |")
    assert "| eumc | none | - | gcn | 2 | 50.0 | 90.0 |" in md
    csv_text = emit_report(reports, "csv")
    assert csv_text.splitlines()[0].startswith("attack,defense,ablations,arch,runs,asr")
    with pytest.raises(ValueError):
        emit_report(reports, "xml")
    (tmp_path / "r.jsonl").write_text("\n".join(r.to_json() for r in reports) + "\n")
    back = load_reports([tmp_path / "r.jsonl"])
    assert [json.loads(r.to_json()) for r in back] == [json.loads(r.to_json()) for r in reports]

