import numpy as np
import pytest

from conftest import clustered, make_store
from ssjoin.bucket_graph import BucketGraph, PruneBudget, build_graph
from ssjoin.bucketizer import BucketPayload
from ssjoin.errors import BudgetExceeded, FormatError, PlanMismatch
from ssjoin.evaluator import PairSet, brute_force_join
from ssjoin.executor import (PAIR_DTYPE, PAIRS_HEADER_BYTES, PairWriter, RunStats, read_pairs, run_join,
                             verify_pair)
from ssjoin.memory import MemoryAccountant
from ssjoin.orchestrator import belady_plan, capacity_in_buckets, make_schedule, orchestrate


def payload(ids, V):
    return BucketPayload(np.asarray(ids, np.uint64), np.asarray(V, np.float32), 4096)


def test_verify_cross_and_self():
    a = payload([5, 9], [[0, 0], [3, 0]])
    b = payload([2, 7], [[0, 0.5], [3, 1.1]])
    pairs, dc = verify_pair(a, b, 1.0)
    assert dc == 4
    assert sorted(zip(pairs["a"].tolist(), pairs["b"].tolist())) == [(2, 5)]
    assert pairs["dist"][0] == pytest.approx(0.5)
    pairs, dc = verify_pair(a, None, 3.0, same_bucket=True)
    assert dc == 1 and pairs["a"].tolist() == [5] and pairs["b"].tolist() == [9]


def test_verify_boundary_distance_kept():
    a = payload([0], [[0.0]])
    b = payload([1], [[0.5]])
    pairs, _ = verify_pair(a, b, 0.5)
    assert len(pairs) == 1 and pairs["dist"][0] <= np.float32(0.5)


def test_pairs_file_roundtrip(tmp_path):
    recs = np.zeros(3, PAIR_DTYPE)
    recs["a"], recs["b"], recs["dist"] = [1, 2, 3], [4, 5, 6], [0.1, 0.2, 0.3]
    with PairWriter(tmp_path / "r.pairs", 0.5, 10) as w:
        w.write(recs[:1])
        w.write(recs[1:])
    eps, N, got = read_pairs(tmp_path / "r.pairs")
    assert (eps, N) == (0.5, 10)
    np.testing.assert_array_equal(got, recs)
    assert (tmp_path / "r.pairs").stat().st_size == PAIRS_HEADER_BYTES + 3 * 20
    (tmp_path / "bad.pairs").write_bytes(b"x" * 40)
    with pytest.raises(FormatError):
        read_pairs(tmp_path / "bad.pairs")


def test_accountant():
    m = MemoryAccountant(100)
    m.reserve(60)
    with pytest.raises(BudgetExceeded):
        m.reserve(50)
    m.release(60)
    m.reserve(100)
    assert m.peak == 100
    with pytest.raises(RuntimeError):
        m.release(200)


def _setup(tmp_path, n=4000, M=40, eps=0.5, lam=1.0, split=None):
    X = clustered(n, 8, 10, 0.3, 11)
    h, idx, store = make_store(tmp_path, X, M, max_bucket_bytes=split)
    g = build_graph(store, idx, eps, PruneBudget(lam, 8), L=store.num_centers - 1)
    return X, store, g


@pytest.mark.parametrize("C,depth,direct", [(2, 1, True), (5, 2, True), (12, 4, False)])
def test_join_matches_oracle(tmp_path, C, depth, direct):
    eps = 0.5
    X, store, g = _setup(tmp_path, eps=eps)
    cache = C * store.max_bucket_bytes
    sched, plan = orchestrate(g, C)
    with PairWriter(tmp_path / "o.pairs", eps, store.N) as w:
        st = run_join(store, sched, plan, eps, w, cache, depth, g.digest(), direct)
    got = PairSet.from_records(read_pairs(tmp_path / "o.pairs")[2])
    oracle = brute_force_join(X, eps)
    assert got == oracle
    assert st.results == len(oracle)
    assert st.cache_misses == plan.misses
    assert st.peak_resident_bytes <= cache
    assert st.distance_computations == g.candidate_pairs(store.count)
    assert st.bytes_total == sum(int(store.length[b]) for b, act in zip(sched.access_seq, plan.action) if act)
    loaded = sched.access_seq[plan.action.astype(bool)]
    useful = int(store.count[loaded].sum()) * store.record_bytes
    assert st.amp == pytest.approx(st.bytes_total / useful) and st.amp >= 1.0


def test_join_with_split_buckets(tmp_path):
    eps = 0.5
    X, store, g = _setup(tmp_path, eps=eps, M=8, split=8192)
    assert store.M > store.num_centers
    C = 4
    sched, plan = orchestrate(g, C)
    st = run_join(store, sched, plan, eps, None, C * store.max_bucket_bytes)
    assert st.results == len(brute_force_join(X, eps))
    assert st.peak_resident_bytes <= C * store.max_bucket_bytes


def test_plan_mismatches(tmp_path):
    eps = 0.5
    X, store, g = _setup(tmp_path, n=1000, M=10, eps=eps)
    sched, plan = orchestrate(g, 3)
    cache = 3 * store.max_bucket_bytes
    with pytest.raises(PlanMismatch):
        run_join(store, sched, plan, eps, None, cache - 1)
    with pytest.raises(PlanMismatch):
        run_join(store, sched, plan, eps, None, cache, graph_digest="0" * 16)
    other = make_schedule(BucketGraph.from_edges(store.M, []), np.arange(store.M))
    with pytest.raises(PlanMismatch):
        run_join(store, other, plan, eps, None, cache)
    with pytest.raises(ValueError):
        run_join(store, sched, plan, 0.0, None, cache)


def test_unpaired_plan_rejected(tmp_path):
    # at the last load (3, for task (2, 3)) buckets 2 and 4 are both dead;
    # unpaired Belady takes the lower id, the task partner
    eps = 0.5
    X, store, g = _setup(tmp_path, n=1000, M=10, eps=eps)
    g2 = BucketGraph.from_edges(store.M, [(1, 2), (1, 4), (2, 3)], self_check=False)
    s2 = make_schedule(g2, np.arange(store.M))
    assert s2.access_seq.tolist() == [1, 2, 1, 4, 2, 3]
    bad = belady_plan(s2.access_seq, store.M, 2, paired=False)
    assert bad.victim[5] == 2
    with pytest.raises(PlanMismatch):
        run_join(store, s2, bad, eps, None, 2 * store.max_bucket_bytes)
    ok = belady_plan(s2.access_seq, store.M, 2, paired=True)
    run_join(store, s2, ok, eps, None, 2 * store.max_bucket_bytes)


def test_stats_serialisation():
    st = RunStats(bytes_total=8192, bytes_useful=4096, cache_hits=3, cache_misses=1)
    d = st.to_dict()
    assert d["amp"] == 2.0 and d["hit_rate"] == 0.75 and d["schema"] == 1
    assert len(st.csv_row()) == len(RunStats.CSV_FIELDS)
    assert "amp=2.0" in st.to_text()
