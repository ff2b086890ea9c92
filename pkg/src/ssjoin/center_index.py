"""In-memory HNSW over bucket centres.

Adjacency is stored densely: ``nbrs[layer, node, :counts[layer, node]]``.
Layer 0 allows ``2 * graph_degree`` links, upper layers ``graph_degree``.
Links are kept symmetric: when a node overflows it drops its farthest
neighbour and that neighbour drops the back-link too.  A repair pass after
construction reconnects any layer-0 components the pruning split off.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import jit
from .errors import FormatError, NonFiniteInput
from .kernels import _sq32

CIDX_MAGIC = b"SSJCIDX\0"
CIDX_VERSION = 1
MAX_LEVEL = 16


@jit
def _search_layer(X, q, eps_ids, ef, layer, nbrs, counts, visited, stamp):
    """Best-first search on one layer; returns (dist2, id) list sorted ascending."""
    cand = [(np.float32(0.0), np.int64(0))]
    cand.pop()
    res = [(np.float32(0.0), np.int64(0))]
    res.pop()
    for e in eps_ids:
        if visited[e] == stamp:
            continue
        visited[e] = stamp
        d = _sq32(q, X[e])
        heapq.heappush(cand, (d, np.int64(e)))
        heapq.heappush(res, (-d, -np.int64(e)))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        d, c = heapq.heappop(cand)
        if len(res) >= ef and d > -res[0][0]:
            break
        for t in range(counts[layer, c]):
            nb = nbrs[layer, c, t]
            if visited[nb] == stamp:
                continue
            visited[nb] = stamp
            dn = _sq32(q, X[nb])
            if len(res) < ef or dn < -res[0][0]:
                heapq.heappush(cand, (dn, np.int64(nb)))
                heapq.heappush(res, (-dn, -np.int64(nb)))
                if len(res) > ef:
                    heapq.heappop(res)
    out = [(-d, -i) for d, i in res]
    out.sort()
    return out


@jit
def _greedy_descent(X, q, entry, top, bottom, nbrs, counts):
    cur = entry
    cur_d = _sq32(q, X[cur])
    for layer in range(top, bottom, -1):
        changed = True
        while changed:
            changed = False
            node = cur
            for t in range(counts[layer, node]):
                nb = nbrs[layer, node, t]
                dn = _sq32(q, X[nb])
                if dn < cur_d or (dn == cur_d and nb < cur):
                    cur = nb
                    cur_d = dn
                    changed = True
    return cur


@jit
def _select_heuristic(X, cands, m):
    """HNSW neighbour heuristic: keep a candidate only if it is closer to the
    query than to every neighbour already kept; backfill with the nearest
    discarded ones so the list reaches ``m`` when possible."""
    keep = np.empty(m, np.int64)
    n = 0
    skipped = np.empty(len(cands), np.int64)
    ns = 0
    for d, c in cands:
        if n >= m:
            break
        good = True
        for t in range(n):
            if _sq32(X[c], X[keep[t]]) < d:
                good = False
                break
        if good:
            keep[n] = c
            n += 1
        else:
            skipped[ns] = c
            ns += 1
    t = 0
    while n < m and t < ns:
        keep[n] = skipped[t]
        n += 1
        t += 1
    return keep[:n]


@jit
def _remove_link(nbrs, counts, layer, a, b):
    n = counts[layer, a]
    for t in range(n):
        if nbrs[layer, a, t] == b:
            nbrs[layer, a, t] = nbrs[layer, a, n - 1]
            nbrs[layer, a, n - 1] = -1
            counts[layer, a] = n - 1
            return


@jit
def _add_link(X, nbrs, counts, layer, a, b, cap):
    n = counts[layer, a]
    for t in range(n):
        if nbrs[layer, a, t] == b:
            return
    nbrs[layer, a, n] = b
    counts[layer, a] = n + 1
    if n + 1 > cap:
        # drop the farthest (ties: highest id) and its back-link
        worst = -1
        worst_d = np.float32(-1.0)
        for t in range(n + 1):
            c = nbrs[layer, a, t]
            dc = _sq32(X[a], X[c])
            if dc > worst_d or (dc == worst_d and c > worst):
                worst = c
                worst_d = dc
        _remove_link(nbrs, counts, layer, a, worst)
        _remove_link(nbrs, counts, layer, worst, a)


@jit
def _build(X, levels, deg, efc, nbrs, counts):
    M = X.shape[0]
    visited = np.zeros(M, np.int32)
    stamp = np.int32(0)
    entry = 0
    top = levels[0]
    for q in range(1, M):
        lq = levels[q]
        ep = _greedy_descent(X, X[q], entry, top, lq, nbrs, counts)
        eps_ids = np.array([ep], np.int64)
        for layer in range(min(lq, top), -1, -1):
            stamp += 1
            found = _search_layer(X, X[q], eps_ids, efc, layer, nbrs, counts, visited, stamp)
            chosen = _select_heuristic(X, found, deg)
            cap = 2 * deg if layer == 0 else deg
            for c in chosen:
                _add_link(X, nbrs, counts, layer, q, c, cap)
                _add_link(X, nbrs, counts, layer, c, q, cap)
            eps_ids = np.empty(len(found), np.int64)
            for t in range(len(found)):
                eps_ids[t] = found[t][1]
        if lq > top:
            top = lq
            entry = q
    return entry


@jit
def _search_batch(X, Q, k, ef, entry, top, nbrs, counts, out_ids, out_d):
    visited = np.zeros(X.shape[0], np.int32)
    stamp = np.int32(0)
    for r in range(Q.shape[0]):
        q = Q[r]
        ep = _greedy_descent(X, q, entry, top, 0, nbrs, counts)
        stamp += 1
        if stamp > 2000000000:
            visited[:] = 0
            stamp = 1
        found = _search_layer(X, q, np.array([ep], np.int64), max(ef, k), 0, nbrs, counts, visited, stamp)
        for t in range(k):
            if t < len(found):
                out_d[r, t] = found[t][0]
                out_ids[r, t] = found[t][1]
            else:
                out_d[r, t] = np.inf
                out_ids[r, t] = -1


@dataclass
class CenterIndex:
    centers: np.ndarray          # (M, d) float32
    levels: np.ndarray           # (M,) int32
    nbrs: np.ndarray             # (layers, M, 2*graph_degree) int32, -1 padded
    counts: np.ndarray           # (layers, M) int32
    entry_point: int
    graph_degree: int = 16
    ef_construction: int = 200

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def num_layers(self) -> int:
        return self.nbrs.shape[0]

    @property
    def nbytes(self) -> int:
        return self.centers.nbytes + self.levels.nbytes + self.nbrs.nbytes + self.counts.nbytes

    def neighbors(self, node: int, layer: int = 0) -> np.ndarray:
        return self.nbrs[layer, node, : self.counts[layer, node]].copy()

    def search_batch(self, queries: np.ndarray, k: int, ef_search: int = 64):
        """Approximate k-NN for each row of ``queries``.

        Returns ``(ids, dists)`` of shape ``(n, min(k, M))``; distances are
        true L2 (not squared), ascending, ties broken by id.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
        k = min(k, self.size)
        ids = np.empty((len(queries), k), np.int64)
        d2 = np.empty((len(queries), k), np.float32)
        _search_batch(self.centers, queries, k, max(ef_search, k), self.entry_point,
                      self.num_layers - 1, self.nbrs, self.counts, ids, d2)
        return ids, np.sqrt(d2)

    def search(self, query: np.ndarray, k: int, ef_search: int = 64) -> list[tuple[int, float]]:
        ids, dists = self.search_batch(query, k, ef_search)
        return [(int(i), float(d)) for i, d in zip(ids[0], dists[0])]

    def save(self, path) -> None:
        head = struct.pack("<8sIIIIIII", CIDX_MAGIC, CIDX_VERSION, self.size, self.dim,
                           self.graph_degree, self.ef_construction, self.num_layers, self.entry_point)
        with open(path, "wb") as f:
            f.write(head)
            for arr, dt in ((self.centers, "<f4"), (self.levels, "<i4"),
                            (self.counts, "<i4"), (self.nbrs, "<i4")):
                f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())

    @classmethod
    def load(cls, path) -> "CenterIndex":
        raw = Path(path).read_bytes()
        hsize = struct.calcsize("<8sIIIIIII")
        magic, version, M, d, deg, efc, layers, entry = struct.unpack_from("<8sIIIIIII", raw)
        if magic != CIDX_MAGIC or version != CIDX_VERSION:
            raise FormatError(f"{path}: not a v{CIDX_VERSION} center index")
        off = hsize
        out = []
        for shape, dt in (((M, d), "<f4"), ((M,), "<i4"), ((layers, M), "<i4"),
                          ((layers, M, 2 * deg), "<i4")):
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape)
            out.append(arr.astype(dt[1:], copy=True))
            off += n * 4
        if off != len(raw):
            raise FormatError(f"{path}: trailing or missing bytes")
        return cls(out[0], out[1], out[3], out[2], entry, deg, efc)


def _repair_layer0(idx: CenterIndex) -> int:
    """Join every layer-0 component to the entry point's component.

    Returns the number of links added.
    """
    M = idx.size
    cap = 2 * idx.graph_degree
    X = idx.centers
    added = 0
    while True:
        seen = np.zeros(M, bool)
        stack = [idx.entry_point]
        seen[idx.entry_point] = True
        while stack:
            u = stack.pop()
            for v in idx.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
        if seen.all():
            return added
        # component of the lowest unreached id
        start = int(np.flatnonzero(~seen)[0])
        comp = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in idx.neighbors(u):
                if int(v) not in comp:
                    comp.add(int(v))
                    stack.append(int(v))
        comp_ids = np.array(sorted(comp))
        reach_ids = np.flatnonzero(seen)
        ca = comp_ids[idx.counts[0, comp_ids] < cap]
        ra = reach_ids[idx.counts[0, reach_ids] < cap]
        if len(ca) == 0:
            ca = comp_ids
        if len(ra) == 0:
            ra = reach_ids
        diff = X[ca][:, None, :].astype(np.float64) - X[ra][None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        a, b = np.unravel_index(int(np.argmin(d2)), d2.shape)
        a, b = int(ca[a]), int(ra[b])
        for u, v in ((a, b), (b, a)):
            n = idx.counts[0, u]
            if n >= cap:
                # make room: drop u's farthest link (the other end keeps its
                # degree budget too, so drop the back-link as well)
                nb = idx.neighbors(u)
                far = int(nb[np.argmax(((X[nb] - X[u]) ** 2).sum(1))])
                _remove_link(idx.nbrs, idx.counts, 0, u, far)
                _remove_link(idx.nbrs, idx.counts, 0, far, u)
                n = idx.counts[0, u]
            idx.nbrs[0, u, n] = v
            idx.counts[0, u] = n + 1
        added += 1


def build_index(centers: np.ndarray, graph_degree: int = 16, ef_construction: int = 200,
                seed: int = 0) -> CenterIndex:
    """Build the proximity graph over ``centers``.  Deterministic per seed."""
    X = np.ascontiguousarray(centers, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("centers must be a non-empty 2-D array")
    if not np.isfinite(X).all():
        raise NonFiniteInput("centers contain NaN or inf")
    if graph_degree < 2:
        raise ValueError("graph_degree must be >= 2")
    M = X.shape[0]
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(M)  # (0, 1]
    levels = np.minimum(np.floor(-np.log(u) / np.log(graph_degree)), MAX_LEVEL).astype(np.int32)
    layers = int(levels.max()) + 1
    nbrs = np.full((layers, M, 2 * graph_degree + 1), -1, np.int32)
    counts = np.zeros((layers, M), np.int32)
    entry = int(_build(X, levels, graph_degree, ef_construction, nbrs, counts))
    idx = CenterIndex(X, levels, np.ascontiguousarray(nbrs[:, :, : 2 * graph_degree]), counts,
                      entry, graph_degree, ef_construction)
    _repair_layer0(idx)
    return idx


def search(index: CenterIndex, query: np.ndarray, k: int, ef_search: int = 64) -> list[tuple[int, float]]:
    """``k`` nearest centres to ``query`` as ``(id, distance)``, ascending."""
    if ef_search < k:
        raise ValueError("ef_search must be >= k")
    return index.search(query, k, ef_search)
