import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgraph_backdoor.attacher import (LinkMode, apply_plans, attach, plan_attachment, plan_many,
                                        read_manifest, select_trigger, write_manifest)
from subgraph_backdoor.errors import UncoveredCategoryError
from subgraph_backdoor.pool import SubgraphTrigger, TriggerPool

from conftest import random_graph, random_pool


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_singleton_pool():
    pool = random_pool(np.random.default_rng(0), 2, 1, 3, 4)
    assert select_trigger(pool, 1, np.ones(4))[0] == 0


def test_identical_rows_beat_orthogonal_rows():
    x = np.array([1.0, 0.0, 0.0])
    pool = TriggerPool(1, 2)
    ortho = SubgraphTrigger(np.arange(3), np.zeros((0, 2)), np.array([[0, 1.0, 0]] * 3), np.ones(1), 0)
    same = SubgraphTrigger(np.arange(3), np.zeros((0, 2)), np.tile(x, (3, 1)), np.ones(1), 0)
    pool.lists[0] = [ortho, same]
    j, s = select_trigger(pool, 0, x)
    assert j == 1 and s == pytest.approx(3.0)


def test_ties_go_to_lowest_index():
    pool = TriggerPool(1, 3)
    feats = np.eye(3)
    pool.lists[0] = [SubgraphTrigger(np.arange(3), np.zeros((0, 2)), feats.copy(), np.ones(1), 0) for _ in range(3)]
    assert select_trigger(pool, 0, np.ones(3))[0] == 0


@pytest.mark.parametrize("seed", range(20))
def test_selection_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    pool = random_pool(rng, 2, 5, 4, 6)
    x = rng.standard_normal(6)
    best, best_s = None, -np.inf
    for j, t in enumerate(pool.lists[1]):
        s = sum(_cos(row, x) for row in t.features)
        if s > best_s:
            best, best_s = j, s
    j, s = select_trigger(pool, 1, x)
    assert j == best
    assert s == pytest.approx(best_s, abs=1e-12)
    assert select_trigger(pool, 1, 2.5 * x)[0] == j  # positive rescaling


def test_empty_category_raises():
    pool = TriggerPool(2, 1)
    with pytest.raises(UncoveredCategoryError, match="uncovered target category"):
        select_trigger(pool, 0, np.ones(3))
    with pytest.raises(UncoveredCategoryError):
        plan_many(np.ones((2, 3)), pool, [0], [1], 0.2)


def test_all_below_threshold_gives_single_argmax_edge():
    x = np.array([1.0, 0.0])
    feats = np.array([[-1.0, 0.1], [0.1, 1.0], [-1.0, -1.0]])
    conn, cos = plan_attachment(feats, x, 0.5)
    assert conn == (1,)


def test_link_all_and_link_one():
    rng = np.random.default_rng(1)
    feats, x = rng.standard_normal((5, 3)), rng.standard_normal(3)
    assert plan_attachment(feats, x, -1.0)[0] == tuple(range(5))
    assert plan_attachment(feats, x, 0.0, LinkMode.ALL)[0] == tuple(range(5))
    one, cos = plan_attachment(feats, x, 1.0)
    assert one == (int(np.argmax(cos)),)
    assert plan_attachment(feats, x, -0.5, LinkMode.ONE)[0] == one


def test_threshold_is_strict():
    x = np.array([1.0, 0.0])
    feats = np.array([[1.0, 0.0], [1.0, 1.0]])  # cosines 1 and 0.7071...
    c = _cos(feats[1], x)
    assert plan_attachment(feats, x, c)[0] == (0,)
    assert plan_attachment(feats, x, c - 1e-9)[0] == (0, 1)


@pytest.mark.parametrize("seed", range(20))
def test_plans_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    feats, x = rng.standard_normal((5, 4)), rng.standard_normal(4)
    tau = float(rng.uniform(-0.5, 0.8))
    cos = [_cos(f, x) for f in feats]
    expected = sorted({int(np.argmax(cos))} | {j for j, c in enumerate(cos) if c > tau})
    assert list(plan_attachment(feats, x, tau)[0]) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1, 1))
def test_plan_invariants(seed, tau):
    rng = np.random.default_rng(seed)
    feats, x = rng.standard_normal((5, 3)), rng.standard_normal(3)
    conn, cos = plan_attachment(feats, x, tau)
    top = int(np.argmax(cos))
    assert len(conn) >= 1 and top in conn
    assert all(cos[j] > tau for j in conn if j != top)


def test_attach_leaves_existing_graph_untouched():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 8, 4, k=2)
    pool = random_pool(rng, 2, 3, 4, 4)
    out, plan = attach(g, pool, 3, 1, 0.2)
    assert out.num_nodes == 12
    np.testing.assert_array_equal(out.features[:8], g.features)
    kept = [e for e in out.edges.tolist() if max(e) < 8]
    assert kept == g.edges.tolist()
    trig = pool.get(1, plan.pool_index)
    new_host_edges = sorted(e[1] - 8 for e in out.edges.tolist() if e[0] == 3 and e[1] >= 8)
    assert new_host_edges == list(plan.connect_to)
    assert set(out.origin_tags[8:, 0].tolist()) == {1}
    np.testing.assert_array_equal(out.features[8:], trig.features)


def test_apply_plans_many_hosts():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 10, 3, k=2)
    pool = random_pool(rng, 2, 2, 3, 3)
    plans = plan_many(g.features, pool, [0, 0, 5], [0, 1, 1], 0.2)
    out, ids = apply_plans(g, pool, plans)
    assert out.num_nodes == 19 and len(ids) == 3
    out.validate()


def test_random_selection_uses_rng():
    rng = np.random.default_rng(4)
    pool = random_pool(rng, 1, 6, 3, 3)
    feats = rng.standard_normal((50, 3))
    picks = {p.pool_index for p in plan_many(feats, pool, range(50), [0] * 50, 0.2, random_selection=True,
                                             rng=np.random.default_rng(0))}
    assert len(picks) > 1


def test_mean_reduce_ranks_like_sum():
    rng = np.random.default_rng(5)
    pool = random_pool(rng, 1, 5, 4, 3)
    for _ in range(10):
        x = rng.standard_normal(3)
        assert select_trigger(pool, 0, x)[0] == select_trigger(pool, 0, x, reduce="mean")[0]


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    g = random_graph(rng, 6, 3)
    pool = random_pool(rng, 2, 2, 3, 3)
    plans = plan_many(g.features, pool, [1, 2, 4], [0, 1, 1], 0.2)
    write_manifest(plans, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert [(p.host, p.category, p.pool_index, p.connect_to) for p in back] == \
           [(p.host, p.category, p.pool_index, p.connect_to) for p in plans]
    assert all(np.allclose(a.scores, b.scores) for a, b in zip(back, plans))

