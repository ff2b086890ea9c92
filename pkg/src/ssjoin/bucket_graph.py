"""Bucket dependency graph.

For every bucket ``b`` the centre index proposes the ``L`` nearest other
buckets.  A candidate survives the triangle test when

    ||c_b - c_j|| - r_b - r_j <= eps

and then goes through probabilistic pruning: walking survivors from the
farthest inwards, each contributes ``arccos(min(x, 1))`` (optionally scaled
by ``mu(d)``) to a running estimate of the fraction of missed neighbours,
where ``x = (||c_b - c_j|| / 2) / (r_b + eps)``.  Candidates are dropped
until that estimate would reach ``1 - lambda``.

Edges are stored once, oriented ``i < j``.  Every bucket is also paired
with itself (``self_check``).
"""
from __future__ import annotations

import csv
import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bucketizer import BucketStore
from .center_index import CenterIndex
from .errors import FormatError, LTooSmallWarning

BDG_MAGIC = b"SSJBDG\0\0"
BDG_VERSION = 1
_BDG_HEAD = "<8sIIQddI"


def mu_constant(dim: int) -> float:
    """``pi^-1/2 * Gamma((d-1)/2) / Gamma(d/2)``, via log-gamma."""
    if dim < 2:
        return math.inf
    return math.exp(-0.5 * math.log(math.pi) + math.lgamma((dim - 1) / 2) - math.lgamma(dim / 2))


@dataclass(frozen=True)
class PruneBudget:
    lam: float
    dim: int
    apply_mu: bool = True

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")

    @property
    def mu(self) -> float:
        return mu_constant(self.dim)

    @property
    def scale(self) -> float:
        return self.mu if self.apply_mu else 1.0


def _exact_center_dists(centers: np.ndarray, b: int, ids: np.ndarray) -> np.ndarray:
    diff = centers[ids].astype(np.float64) - centers[b].astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _order(ids: np.ndarray, dists: np.ndarray) -> list[tuple[int, float]]:
    o = np.lexsort((ids, dists))
    return [(int(ids[k]), float(dists[k])) for k in o]


def candidate_buckets(b: int, index: CenterIndex, L: int, ef_search: int | None = None
                      ) -> list[tuple[int, float]]:
    """Up to ``L`` nearest other centres of ``b`` as ``(id, distance)``, ascending."""
    if L < 1:
        raise ValueError("L must be >= 1")
    k = min(L + 1, index.size)
    ef = max(k, ef_search if ef_search is not None else max(L, 128))
    ids, _ = index.search_batch(index.centers[b], k, ef)
    ids = ids[0]
    ids = ids[(ids != b) & (ids >= 0)][:L]
    return _order(ids, _exact_center_dists(index.centers, b, ids))


def triangle_filter(b: int, candidates, epsilon: float, radius: np.ndarray) -> list[tuple[int, float]]:
    """Keep candidates ``j`` with ``dist(c_b, c_j) - r_b - r_j <= epsilon``."""
    rb = float(radius[b])
    return [(j, d) for j, d in candidates if d - rb - float(radius[j]) <= epsilon]


def prune_terms(survivors, ball_radius: float) -> np.ndarray:
    """``arccos(min(x_i, 1))`` per survivor, unscaled."""
    d = np.array([dist for _, dist in survivors], dtype=np.float64)
    if ball_radius <= 0:
        return np.zeros(len(d))
    x = (d / 2.0) / ball_radius
    return np.arccos(np.minimum(x, 1.0))


def probabilistic_prune(b: int, survivors, budget: PruneBudget, epsilon: float,
                        radius_b: float, ball_radius: float | None = None) -> list[tuple[int, float]]:
    """Drop far candidates while the missed-neighbour estimate stays below ``1 - lambda``.

    ``ball_radius`` defaults to ``radius_b + epsilon``.  Returns the kept
    candidates in ascending distance order.
    """
    if not survivors:
        return []
    r = radius_b + epsilon if ball_radius is None else ball_radius
    far_first = sorted(survivors, key=lambda t: (-t[1], -t[0]))
    terms = prune_terms(far_first, r) * budget.scale
    limit = 1.0 - budget.lam
    total = 0.0
    cut = len(far_first)
    for k, term in enumerate(terms):
        total += term
        if total >= limit:
            cut = k
            break
    kept = far_first[cut:]
    return sorted(kept, key=lambda t: (t[1], t[0]))


@dataclass
class BucketGraph:
    M: int
    offsets: np.ndarray        # (M+1,) int64, CSR row pointers
    nbrs: np.ndarray           # (|E|,) int32, ascending per row, all > row id
    self_check: bool = True
    epsilon: float = 0.0
    lam: float = 1.0
    apply_mu: bool = True
    stats: dict = field(default_factory=dict)
    per_bucket: dict = field(default_factory=dict)

    @classmethod
    def from_edges(cls, M: int, edges, **kw) -> "BucketGraph":
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            lo = np.minimum(e[:, 0], e[:, 1])
            hi = np.maximum(e[:, 0], e[:, 1])
            keep = lo != hi
            e = np.unique(np.stack([lo[keep], hi[keep]], 1), axis=0)
        counts = np.bincount(e[:, 0], minlength=M) if len(e) else np.zeros(M, np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(M, offsets, e[:, 1].astype(np.int32) if len(e) else np.empty(0, np.int32), **kw)

    @property
    def num_edges(self) -> int:
        return len(self.nbrs)

    def out_neighbors(self, v: int) -> np.ndarray:
        return self.nbrs[self.offsets[v]:self.offsets[v + 1]]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edges(self) -> np.ndarray:
        src = np.repeat(np.arange(self.M), self.out_degree())
        return np.stack([src, self.nbrs.astype(np.int64)], 1)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<QB", self.M, self.self_check))
        h.update(self.offsets.astype("<i8").tobytes())
        h.update(self.nbrs.astype("<i4").tobytes())
        return h.hexdigest()[:16]

    def candidate_pairs(self, counts: np.ndarray) -> int:
        """Vector pairs the join will compare under this graph."""
        counts = np.asarray(counts, dtype=np.int64)
        e = self.edges()
        cross = int((counts[e[:, 0]] * counts[e[:, 1]]).sum()) if len(e) else 0
        own = int((counts * (counts - 1) // 2).sum()) if self.self_check else 0
        return cross + own

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(struct.pack(_BDG_HEAD, BDG_MAGIC, BDG_VERSION, self.M, self.num_edges,
                                self.epsilon, self.lam, int(self.apply_mu) | (int(self.self_check) << 1)))
            f.write(self.offsets.astype("<i8").tobytes())
            f.write(self.nbrs.astype("<i4").tobytes())

    @classmethod
    def load(cls, path) -> "BucketGraph":
        raw = Path(path).read_bytes()
        magic, version, M, E, eps, lam, flags = struct.unpack_from(_BDG_HEAD, raw)
        if magic != BDG_MAGIC or version != BDG_VERSION:
            raise FormatError(f"{path}: not a v{BDG_VERSION} bucket graph")
        off = struct.calcsize(_BDG_HEAD)
        if len(raw) != off + 8 * (M + 1) + 4 * E:
            raise FormatError(f"{path}: size mismatch")
        offsets = np.frombuffer(raw, "<i8", M + 1, off).astype(np.int64)
        nbrs = np.frombuffer(raw, "<i4", E, off + 8 * (M + 1)).astype(np.int32)
        return cls(M, offsets, nbrs, bool(flags & 2), eps, lam, bool(flags & 1))

    def write_stats_csv(self, path) -> None:
        cols = ["bucket", "candidates", "after_triangle", "after_prune"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            n = len(self.per_bucket.get("candidates", []))
            for b in range(n):
                w.writerow([b] + [int(self.per_bucket[c][b]) for c in cols[1:]])


def build_graph(store: BucketStore, index: CenterIndex, epsilon: float, budget: PruneBudget,
                L: int = 256, adaptive: bool = True, ef_search: int | None = None,
                combine: str = "both") -> BucketGraph:
    """Candidate search, triangle filter and pruning for every bucket.

    Works at the level of centres, then expands each centre pair to all of
    their (sub-)buckets; sub-buckets of one centre are always paired.
    Stats record vector-pair counts for the triangle-only and the pruned
    graphs.

    ``combine`` decides how the two endpoints' verdicts merge.  With
    ``"both"`` a pair pruned by either side is dropped (a side that never
    listed the other abstains); ``"either"`` keeps a pair listed by either.
    """
    if combine not in ("both", "either"):
        raise ValueError(f"unknown combine mode {combine!r}")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    Mc = store.num_centers
    radius_c = np.zeros(Mc, np.float64)
    np.maximum.at(radius_c, store.parent, store.radius.astype(np.float64))
    subs = [[] for _ in range(Mc)]
    for s in range(store.M):
        if store.count[s] > 0:
            subs[store.parent[s]].append(s)

    n_cand = np.zeros(Mc, np.int64)
    n_tri = np.zeros(Mc, np.int64)
    n_kept = np.zeros(Mc, np.int64)
    tri_pairs: set[tuple[int, int]] = set()
    kept_pairs: set[tuple[int, int]] = set()
    vetoed: set[tuple[int, int]] = set()
    truncated = 0
    base_L = max(1, min(L, Mc - 1)) if Mc > 1 else 0
    for p in range(Mc):
        if not subs[p] or Mc == 1:
            continue
        cur_L = base_L
        while True:
            cands = candidate_buckets(p, index, cur_L, ef_search)
            passes_last = bool(cands) and cands[-1][1] - radius_c[p] - radius_c[cands[-1][0]] <= epsilon
            if not (passes_last and len(cands) >= cur_L and cur_L < Mc - 1):
                break
            if not adaptive:
                truncated += 1
                break
            cur_L = min(2 * cur_L, Mc - 1)
        cands = [(j, d) for j, d in cands if subs[j]]
        surv = triangle_filter(p, cands, epsilon, radius_c)
        kept = probabilistic_prune(p, surv, budget, epsilon, float(radius_c[p]))
        n_cand[p], n_tri[p], n_kept[p] = len(cands), len(surv), len(kept)
        for j, _ in surv:
            tri_pairs.add((min(p, j), max(p, j)))
        kept_ids = {j for j, _ in kept}
        for j, _ in surv:
            key = (min(p, j), max(p, j))
            if j in kept_ids:
                kept_pairs.add(key)
            else:
                vetoed.add(key)
    if combine == "both":
        kept_pairs -= vetoed
    if truncated:
        warnings.warn(f"{truncated} buckets had their L-th candidate pass the triangle filter; "
                      f"candidate lists may be truncated (L={L})", LTooSmallWarning)

    def expand(pairs):
        out = []
        for p, q in pairs:
            out.extend((s, t) for s in subs[p] for t in subs[q])
        for p in range(Mc):
            sp = subs[p]
            out.extend((sp[a], sp[b]) for a in range(len(sp)) for b in range(a + 1, len(sp)))
        return out

    meta = dict(epsilon=float(epsilon), lam=budget.lam, apply_mu=budget.apply_mu)
    graph = BucketGraph.from_edges(store.M, expand(kept_pairs), **meta)
    tri_graph = BucketGraph.from_edges(store.M, expand(tri_pairs), **meta)
    graph.stats = {
        "edges": graph.num_edges,
        "edges_triangle": tri_graph.num_edges,
        "pairs_pruned": graph.candidate_pairs(store.count),
        "pairs_triangle": tri_graph.candidate_pairs(store.count),
        "candidates_total": int(n_cand.sum()),
        "truncated": truncated,
        "mu": budget.mu,
    }
    graph.per_bucket = {"candidates": n_cand, "after_triangle": n_tri, "after_prune": n_kept}
    return graph
