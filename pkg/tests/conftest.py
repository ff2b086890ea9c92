import numpy as np
import pytest

from ssjoin.bucketizer import assign_and_layout, select_centers
from ssjoin.center_index import build_index
from ssjoin.dataset import write_fbin


def make_store(tmp_path, X, M, budget=32 << 20, max_bucket_bytes=None, seed=0, name="store"):
    """Write ``X`` as fbin and bucketize it; returns (handle, index, store)."""
    h = write_fbin(tmp_path / f"{name}.fbin", np.asarray(X, np.float32))
    cids, centers = select_centers(h, M, seed)
    index = build_index(centers, 8, 100, seed)
    store = assign_and_layout(h, index, budget, tmp_path, name, max_bucket_bytes, 64, cids)
    return h, index, store


def clustered(n, d, k, spread, seed):
    rng = np.random.default_rng(seed)
    C = rng.random((k, d)) * 4
    lab = rng.integers(0, k, n)
    return (C[lab] + spread * rng.standard_normal((n, d))).astype(np.float32)


def optimal_misses(seq, C):
    """Exhaustive optimal offline eviction: DP over every reachable cache state."""
    states = {frozenset(): 0}
    for b in seq:
        nxt = {}
        for cache, m in states.items():
            if b in cache:
                cands = [(cache, m)]
            elif len(cache) < C:
                cands = [(cache | {b}, m + 1)]
            else:
                cands = [((cache - {v}) | {b}, m + 1) for v in cache]
            for s, mm in cands:
                if mm < nxt.get(s, 1 << 30):
                    nxt[s] = mm
        states = nxt
    return min(states.values())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
