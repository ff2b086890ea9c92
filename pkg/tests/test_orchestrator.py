import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import optimal_misses
from ssjoin.bucket_graph import BucketGraph
from ssjoin.errors import CapacityTooSmall, FormatError, PlanMismatch, TooLarge
from ssjoin.orchestrator import (HIT, LOAD, EvictionPlan, belady_plan, capacity_in_buckets, load_plan,
                                 make_schedule, mecc_optimal, naive_window_scores, orchestrate, reorder,
                                 save_plan, simulate_policy, window_size)


def random_graph(rng, n, p):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return BucketGraph.from_edges(n, edges)


# ---- reorder -------------------------------------------------------------

def test_reorder_empty_graph_is_identity():
    g = BucketGraph.from_edges(6, [])
    np.testing.assert_array_equal(reorder(g, 3).perm, np.arange(6))


def test_reorder_starts_at_max_out_degree():
    g = BucketGraph.from_edges(8, [(3, j) for j in range(4, 8)] + [(0, 1)])
    assert reorder(g, 4).perm[0] == 3


def test_window_size():
    g = BucketGraph.from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)])
    assert window_size(g, 4) == 4   # d_avg = 1
    assert window_size(g, 1) == 1
    assert window_size(BucketGraph.from_edges(3, [(0, 1), (0, 2), (1, 2)]), 2) == 2


@pytest.mark.parametrize("seed", range(10))
def test_incremental_scores_match_naive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 80))
    g = random_graph(rng, n, float(rng.uniform(0.02, 0.3)))
    C = int(rng.integers(2, 20))
    r = reorder(g, C, record_scores=True)
    assert sorted(r.perm.tolist()) == list(range(n))
    for i, snap in enumerate(r.scores, start=1):
        np.testing.assert_array_equal(snap, naive_window_scores(g, r.perm[:i], r.window))
        # the node placed next is the lowest-id argmax
        assert r.perm[i] == int(np.argmax(snap))


def test_reorder_deterministic():
    g = random_graph(np.random.default_rng(5), 60, 0.1)
    np.testing.assert_array_equal(reorder(g, 6).perm, reorder(g, 6).perm)


# ---- schedule -------------------------------------------------------------

def test_schedule_single_edge():
    g = BucketGraph.from_edges(2, [(0, 1)])
    s = make_schedule(g, [0, 1])
    assert s.tasks.tolist() == [[0, 0], [0, 1], [1, 1]]
    assert s.access_seq.tolist() == [0, 0, 0, 1, 1, 1]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 25), p=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_schedule_covers_edges_once(n, p, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, p)
    perm = rng.permutation(n)
    s = make_schedule(g, perm)
    assert len(s.tasks) == g.num_edges + n
    cross = sorted(tuple(sorted(t)) for t in s.tasks.tolist() if t[0] != t[1])
    assert cross == sorted(map(tuple, g.edges().tolist()))
    # each node's work is one consecutive run
    firsts = s.tasks[:, 0].tolist()
    runs = [k for k, _ in itertools.groupby(firsts)]
    assert len(runs) == len(set(runs))
    np.testing.assert_array_equal(s.access_seq, s.tasks.reshape(-1))


def test_schedule_rejects_bad_perm():
    g = BucketGraph.from_edges(3, [(0, 1)])
    with pytest.raises(ValueError):
        make_schedule(g, [0, 0, 1])


# ---- Belady / simulator ---------------------------------------------------

def test_belady_textbook_sequence():
    seq = [1, 2, 3, 1, 2, 3]
    assert belady_plan(seq, 4, 2).misses == 4
    assert simulate_policy(seq, 2, "lru").misses == 6


def test_belady_compulsory_only():
    seq = [0, 1, 2, 0, 1, 2, 2, 0]
    assert belady_plan(seq, 3, 3).misses == 3


def test_belady_capacity_too_small():
    with pytest.raises(CapacityTooSmall):
        belady_plan([0, 1], 2, 1)


def test_belady_evicts_never_used_first_then_lowest_id():
    plan = belady_plan([0, 1, 2], 3, 2)
    assert plan.victim.tolist() == [-1, -1, 0]
    plan = belady_plan([2, 1, 0, 2], 3, 2)   # 1 is never used again
    assert plan.victim[2] == 1


def test_simulate_edge_cases():
    r = simulate_policy([], 2)
    assert (r.misses, r.hit_rate) == (0, 1.0)
    r = simulate_policy([4] * 5, 1)
    assert r.misses == 1 and r.hit_rate == pytest.approx(4 / 5)
    with pytest.raises(ValueError):
        simulate_policy([1], 2, "random")
    with pytest.raises(CapacityTooSmall):
        simulate_policy([1], 0)


def test_fifo_differs_from_lru():
    seq = [0, 1, 0, 2, 0, 3, 0]
    assert simulate_policy(seq, 2, "lru").misses == 4
    assert simulate_policy(seq, 2, "fifo").misses == 5


@settings(max_examples=150, deadline=None)
@given(seq=st.lists(st.integers(0, 5), max_size=12), C=st.sampled_from([2, 3]))
def test_belady_matches_exhaustive_optimum(seq, C):
    assert belady_plan(seq, 6, C).misses == optimal_misses(seq, C)


def test_belady_never_worse_than_lru_fifo():
    rng = np.random.default_rng(0)
    for _ in range(300):
        C = int(rng.integers(2, 9))
        seq = rng.integers(0, int(rng.integers(3, 30)), int(rng.integers(10, 200)))
        b = belady_plan(seq, 30, C).misses
        assert b <= simulate_policy(seq, C, "lru").misses
        assert b <= simulate_policy(seq, C, "fifo").misses


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), p=st.floats(0, 1), C=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_plan_replay_and_miss_bound(n, p, C, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, p)
    for use_reorder in (True, False):
        sched, plan = orchestrate(g, C, use_reorder)
        peak = plan.replay(sched.access_seq)
        assert peak <= C
        assert plan.misses <= g.M + g.num_edges


def test_paired_belady_keeps_task_partner():
    # unpaired Belady would evict 0 (next used latest) to load 3 at step 5
    seq = [0, 1, 2, 2, 0, 3, 1, 2]
    plan = belady_plan(seq, 4, 2, paired=True)
    plan.replay(seq)


def test_replay_detects_bad_plans():
    seq = [0, 1]
    with pytest.raises(PlanMismatch):
        EvictionPlan(np.array([HIT, LOAD], np.int8), np.array([-1, -1]), 2).replay(seq)
    with pytest.raises(PlanMismatch):
        EvictionPlan(np.array([LOAD, LOAD], np.int8), np.array([-1, -1]), 1).replay(seq)


# ---- MECC -----------------------------------------------------------------

def test_mecc_examples():
    k4 = [(a, b) for a in range(4) for b in range(a + 1, 4)]
    assert mecc_optimal((4, k4), 2) == 7
    assert mecc_optimal((3, [(0, 1), (1, 2)]), 2) == 3
    assert mecc_optimal((3, []), 2) == 0
    with pytest.raises(TooLarge):
        mecc_optimal((9, [(0, 1)]), 2)


@pytest.mark.parametrize("seed", range(8))
def test_mecc_lower_bounds_planned_loads(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 6, 0.5)
    nodes = {v for e in g.edges().tolist() for v in e}
    C = 2 + seed % 2
    opt = mecc_optimal(g, C)
    assert opt >= len(nodes)
    g2 = BucketGraph.from_edges(g.M, g.edges(), self_check=False)
    sched, plan = orchestrate(g2, C)
    assert plan.misses >= opt


# ---- persistence ------------------------------------------------------------

def test_plan_roundtrip(tmp_path):
    g = random_graph(np.random.default_rng(1), 20, 0.2)
    sched, plan = orchestrate(g, 4)
    save_plan(tmp_path / "p.plan", sched, plan)
    s2, p2 = load_plan(tmp_path / "p.plan")
    np.testing.assert_array_equal(s2.perm, sched.perm)
    np.testing.assert_array_equal(s2.tasks, sched.tasks)
    np.testing.assert_array_equal(p2.action, plan.action)
    np.testing.assert_array_equal(p2.victim, plan.victim)
    assert (p2.capacity, s2.graph_digest, s2.window) == (4, g.digest(), sched.window)
    (tmp_path / "bad.plan").write_bytes(b"nope" * 20)
    with pytest.raises(FormatError):
        load_plan(tmp_path / "bad.plan")


def test_capacity_in_buckets():
    assert capacity_in_buckets(100 << 10, 8192) == 12
    assert capacity_in_buckets(4096, 8192) == 0
