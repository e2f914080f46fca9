import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgraph_backdoor import numerics as nx
from subgraph_backdoor.defenses import (EdgePruner, GraphAutoencoder, OutlierNodeFilter, edge_similarity,
                                        isolate_nodes, make_defense, od_filter, prune, prune_ld,
                                        similarity_histogram, similarity_summary, write_histogram)
from subgraph_backdoor.graph import Graph, attach_subgraph
from subgraph_backdoor.harness import generate_sbm
from subgraph_backdoor.pool import SubgraphTrigger

from conftest import random_graph


def _sort_and_cut(g, p):
    """Brute force: score every canonical edge, sort by (cosine, id), cut."""
    scored = []
    for eid, (u, v) in enumerate(g.edges.tolist()):
        a, b = g.features[u], g.features[v]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        scored.append((0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb)), eid))
    scored.sort()
    m = int(np.floor(p * len(scored) + 1e-9))
    return {tuple(g.edges[eid].tolist()) for _, eid in scored[:m]}


@pytest.mark.parametrize("seed", range(10))
def test_prune_matches_sort_and_cut(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 12, 3, p=0.4)
    while g.num_edges < 30:
        g = random_graph(rng, 12, 3, p=0.5)
    p = float(rng.choice([0.1, 0.25, 0.5]))
    out, report = prune(g, percentile=p)
    removed = {tuple(e) for e in report.edges_removed}
    assert removed == _sort_and_cut(g, p)
    assert len(removed) == int(np.floor(p * g.num_edges))
    assert {tuple(e) for e in out.edges.tolist()} == {tuple(e) for e in g.edges.tolist()} - removed


def test_prune_identical_features_threshold():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.ones((4, 3)))
    out, report = prune(g, threshold=0.99)
    assert out.num_edges == 3 and report.edges_removed == []


def test_prune_everything():
    g = random_graph(np.random.default_rng(0), 8, 2)
    out, _ = prune(g, percentile=1.0)
    assert out.num_edges == 0


def test_prune_threshold_mode():
    feats = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]])
    g = Graph.from_edges(3, [(0, 1), (1, 2)], feats)
    out, report = prune(g, threshold=0.5)
    assert report.edges_removed == [[1, 2]]
    assert out.edges.tolist() == [[0, 1]]


def test_pruner_threshold_carries_to_new_graphs():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 12, 3, p=0.5)
    pr = EdgePruner(percentile=0.2)
    pr.fit_transform(g)
    h = random_graph(rng, 12, 3, p=0.5)
    out = pr.transform(h)
    cos = {tuple(e): c for e, c in zip(h.edges.tolist(), np.array(
        [np.dot(h.features[u], h.features[v]) / np.linalg.norm(h.features[u]) / np.linalg.norm(h.features[v])
         for u, v in h.edges]))}
    assert {e for e, c in cos.items() if c > pr.threshold_} == {tuple(e) for e in out.edges.tolist()}


def test_prune_ld_examples():
    feats = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.0, 1.0]])
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], feats, labels=[0, 1, -1, 1])
    out, labels, report = prune_ld(g, threshold=-0.5)
    assert np.array_equal(labels, g.labels) and report.labels_discarded == []
    out, labels, report = prune_ld(g, threshold=0.5)
    assert report.edges_removed == [[1, 2]]
    assert labels.tolist() == [0, -1, -1, 1]
    assert report.labels_discarded == [1]


def test_prune_ld_oracle():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 12, 3, p=0.4, k=3)
    labels = g.labels.copy()
    labels[rng.random(12) < 0.3] = -1
    g = g.with_labels(labels)
    _, new_labels, report = prune_ld(g, percentile=0.3)
    expected = labels.copy()
    for u, v in _sort_and_cut(g, 0.3):
        expected[[u, v]] = -1
    assert np.array_equal(new_labels, expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_defenses_only_remove(seed, p):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 10, 3, p=0.4, k=2)
    out, _, report = prune_ld(g, percentile=p)
    assert {tuple(e) for e in out.edges.tolist()} <= {tuple(e) for e in g.edges.tolist()}
    assert np.all((out.labels == g.labels) | (out.labels == -1))
    assert out.num_nodes == g.num_nodes
    assert 0.0 <= report.trigger_hit_rate <= 1.0


def test_trigger_hit_rate():
    g = Graph.from_edges(3, [(0, 1), (1, 2)], np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))
    t = SubgraphTrigger(np.arange(2), np.array([[0, 1]]), np.array([[0.0, 1.0], [0.0, 1.0]]), np.zeros(2), 0)
    attached, _ = attach_subgraph(g, t, 0, [0], (0, 0))
    _, report = prune(attached, threshold=0.5)  # drops only host-trigger edge (cos 0)
    assert report.edges_removed == [[0, 3]]
    assert report.trigger_hit_rate == pytest.approx(0.5)


def test_isolate_nodes():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.ones((4, 1)), labels=[0, 1, 0, 1])
    out = isolate_nodes(g, [1])
    assert out.edges.tolist() == [[2, 3]]
    assert out.labels.tolist() == [0, -1, 0, 1]


@pytest.fixture(scope="module")
def sbm():
    return generate_sbm(n_nodes=120, p_in=0.08, p_out=0.005, signal=1.0, seed=5)


def test_od_ratio_zero_leaves_graph(sbm):
    out, report = od_filter(sbm, ratio=0.0, epochs=5)
    assert out.equals(sbm) and report.nodes_removed == []


def test_od_rejects_full_ratio(sbm):
    with pytest.raises(ValueError):
        od_filter(sbm, ratio=1.0)


def test_od_ranks_planted_anomaly(sbm):
    feats = sbm.features.copy()
    planted = 17
    feats[planted] = 10 * np.abs(feats).max() * np.sign(feats[planted] + 1e-12)
    g = sbm.with_features(feats)
    f = OutlierNodeFilter(ratio=0.05, epochs=100, seed=0)
    out = f.fit_transform(g)
    rank = int(np.argsort(-f.scores_).tolist().index(planted))
    assert rank < int(0.05 * g.num_nodes)
    assert planted in f.report_.nodes_removed
    assert out.degree[planted] == 0 and out.labels[planted] == -1
    assert len(f.removed_) == 6


def test_od_scores_match_independent_reforward(sbm):
    ae = GraphAutoencoder(hidden=8, latent=4, epochs=20, seed=1).fit(sbm)
    p = ae.params
    a = sbm.adjacency.toarray()
    at = a + np.eye(len(a))
    d = 1 / np.sqrt(at.sum(1))
    ahat = at * d[:, None] * d[None, :]
    z = ahat @ np.maximum(ahat @ sbm.features @ p["W1"], 0) @ p["W2"]
    xhat = z @ p["W3"]
    s = 1 / (1 + np.exp(-z @ z.T))
    ref = 0.5 * np.linalg.norm(sbm.features - xhat, axis=1) + 0.5 * np.linalg.norm(a - s, axis=1)
    np.testing.assert_allclose(ae.scores(sbm), ref, rtol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_autoencoder_gradients(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(3, 13)), 3)
    ae = GraphAutoencoder(hidden=4, latent=3, weight=float(rng.uniform(0.1, 0.9)), seed=seed)
    ae.init(3)
    _, grads = ae.loss_and_grads(g)
    for name in ("W1", "W2", "W3"):
        assert nx.finite_diff_check(lambda _: ae.loss_and_grads(g)[0], ae.params[name], grads[name]) < 1e-4


def test_autoencoder_loss_decreases(sbm):
    ae = GraphAutoencoder(epochs=60, seed=0).fit(sbm)
    assert ae.losses[-1] < ae.losses[0]


def test_od_test_time_protects_host(sbm):
    f = OutlierNodeFilter(ratio=0.1, epochs=20, seed=0)
    f.fit(sbm)
    host = int(f.removed_[0])
    out = f.transform(sbm, protect=[host])
    assert host not in f.report_.nodes_removed
    assert out.degree[host] == sbm.degree[host]


def test_make_defense():
    assert make_defense("none") is None
    assert isinstance(make_defense("prune"), EdgePruner)
    assert make_defense("prune+ld").discard_labels
    assert make_defense("od", ratio=0.1).ratio == 0.1
    with pytest.raises(ValueError):
        make_defense("magic")


def test_edge_similarity_classes(tmp_path):
    g = Graph.from_edges(3, [(0, 1), (1, 2)], np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    t = SubgraphTrigger(np.arange(2), np.array([[0, 1]]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2), 0)
    attached, _ = attach_subgraph(g, t, 0, [0], (0, 0))
    sims = edge_similarity(attached)
    np.testing.assert_allclose(sims["clean"], [1.0, 0.0])
    np.testing.assert_allclose(sorted(sims["trigger"]), sorted([1 / np.sqrt(2), 1 / np.sqrt(2)]))
    np.testing.assert_allclose(sims["connection"], [1 / np.sqrt(2)])
    summ = similarity_summary(attached)
    assert summ["clean_count"] == 2 and summ["connection_count"] == 1
    rows = similarity_histogram(attached, bins=4)
    assert sum(r[1] for r in rows) == 2 and sum(r[2] for r in rows) == 2
    write_histogram(rows, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin,clean_count,trigger_count"
