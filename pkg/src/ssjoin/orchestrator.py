"""Task ordering and cache planning.

* :func:`reorder` -- greedy sliding-window node ordering maximising the
  out-neighbour overlap between a node and the ``w`` nodes placed before
  it, with scores maintained incrementally;
* :func:`make_schedule` -- turn a node order into a task list and the
  flattened bucket access sequence;
* :func:`belady_plan` -- offline optimal eviction for that sequence;
* :func:`simulate_policy` -- replay LRU / FIFO / Belady for comparisons;
* :func:`mecc_optimal` -- exhaustive minimum load sequence on tiny graphs.
"""
from __future__ import annotations

import heapq
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bucket_graph import BucketGraph
from .errors import CapacityTooSmall, FormatError, PlanMismatch, TooLarge

PLAN_MAGIC = b"SSJPLAN\0"
PLAN_VERSION = 1
_PLAN_HEAD = "<8sIIIIQ16s"

HIT, LOAD = 0, 1


def window_size(graph: BucketGraph, C: int) -> int:
    if graph.num_edges == 0:
        return max(1, graph.M)
    d_avg = graph.num_edges / max(1, graph.M)
    return max(1, int(C // d_avg))


def _in_neighbors(graph: BucketGraph) -> tuple[np.ndarray, np.ndarray]:
    """CSR of in-neighbours: sources of ``x`` are ``src[cuts[x]:cuts[x+1]]``."""
    e = graph.edges()
    order = np.argsort(e[:, 1], kind="stable")
    src, dst = e[order, 0], e[order, 1]
    return src.astype(np.int64), np.searchsorted(dst, np.arange(graph.M + 1))


@dataclass
class Reordering:
    perm: np.ndarray                 # perm[new position] = bucket id
    window: int
    scores: list = field(default_factory=list)  # per step: k over all nodes, -1 where placed


def reorder(graph: BucketGraph, C: int, record_scores: bool = False) -> Reordering:
    """Greedy windowed ordering of the bucket graph.

    Starts from the node with the most out-neighbours, then repeatedly
    appends the unplaced node ``v`` maximising
    ``k_v = sum over window nodes u of |N(u) & N(v)|``.  ``k_v`` is updated
    only for nodes sharing a neighbour with the node entering or leaving the
    window.  Ties go to the lowest id.
    """
    M = graph.M
    w = window_size(graph, C)
    src, cuts = _in_neighbors(graph)
    k = np.zeros(M, np.int64)
    placed = np.zeros(M, bool)
    heap = [(0, v) for v in range(M)]
    heapq.heapify(heap)
    perm = np.empty(M, np.int64)
    window: deque[int] = deque()
    scores = []

    def shift(u: int, delta: int) -> None:
        xs = graph.out_neighbors(u)
        if not len(xs):
            return
        # all (x, v) with x in N(u), v -> x; a v sharing several x counts once per x
        lo, hi = cuts[xs], cuts[xs + 1]
        n = hi - lo
        idx = np.repeat(lo - np.cumsum(n) + n, n) + np.arange(n.sum())
        vs = src[idx]
        vs, cnt = np.unique(vs[~placed[vs]], return_counts=True)
        k[vs] += delta * cnt
        for v, kv in zip(vs.tolist(), k[vs].tolist()):
            heapq.heappush(heap, (-kv, v))

    deg = graph.out_degree()
    first = int(np.argmax(deg)) if M else 0
    for i in range(M):
        if i == 0:
            v = first
        else:
            if record_scores:
                snap = k.copy()
                snap[placed] = -1
                scores.append(snap)
            while True:
                negk, v = heapq.heappop(heap)
                if not placed[v] and -negk == k[v]:
                    break
        perm[i] = v
        placed[v] = True
        window.append(v)
        shift(v, +1)
        if len(window) > w:
            shift(window.popleft(), -1)
    return Reordering(perm, w, scores)


def naive_window_scores(graph: BucketGraph, prefix: np.ndarray, w: int) -> np.ndarray:
    """Recompute every unplaced node's window score from scratch."""
    M = graph.M
    sets = [set(graph.out_neighbors(v).tolist()) for v in range(M)]
    win = prefix[max(0, len(prefix) - w):]
    placed = set(prefix.tolist())
    out = np.full(M, -1, np.int64)
    for v in range(M):
        if v not in placed:
            out[v] = sum(len(sets[u] & sets[v]) for u in win)
    return out


@dataclass
class TaskSchedule:
    perm: np.ndarray          # perm[new position] = bucket id
    tasks: np.ndarray         # (T, 2) bucket pairs, processing order
    window: int = 1
    graph_digest: str = ""

    @property
    def access_seq(self) -> np.ndarray:
        return self.tasks.reshape(-1)

    @property
    def M(self) -> int:
        return len(self.perm)


def make_schedule(graph: BucketGraph, perm, window: int = 1) -> TaskSchedule:
    """Visit nodes in ``perm`` order: self pair first, then out-edges by target position."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(graph.M)):
        raise ValueError("perm is not a permutation of the bucket ids")
    pos = np.empty(graph.M, np.int64)
    pos[perm] = np.arange(graph.M)
    tasks = []
    for v in perm.tolist():
        if graph.self_check:
            tasks.append((v, v))
        out = graph.out_neighbors(v)
        for u in out[np.argsort(pos[out], kind="stable")].tolist():
            tasks.append((v, u))
    arr = np.array(tasks, dtype=np.int64).reshape(-1, 2)
    return TaskSchedule(perm, arr, window, graph.digest())


@dataclass
class EvictionPlan:
    """Per-access actions: ``action[i]`` is HIT or LOAD, ``victim[i]`` the
    bucket evicted to make room (-1 if none)."""
    action: np.ndarray
    victim: np.ndarray
    capacity: int

    @property
    def misses(self) -> int:
        return int((self.action == LOAD).sum())

    @property
    def hits(self) -> int:
        return int((self.action == HIT).sum())

    @property
    def hit_rate(self) -> float:
        n = len(self.action)
        return 1.0 if n == 0 else self.hits / n

    def replay(self, access_seq) -> int:
        """Check the plan against a sequence; returns the peak resident count."""
        resident: set[int] = set()
        peak = 0
        seq = np.asarray(access_seq).tolist()
        for i, b in enumerate(seq):
            if self.action[i] == HIT:
                if b not in resident:
                    raise PlanMismatch(f"step {i}: planned hit on non-resident bucket {b}")
            else:
                if b in resident:
                    raise PlanMismatch(f"step {i}: planned load of resident bucket {b}")
                v = int(self.victim[i])
                if v >= 0:
                    resident.remove(v)
                resident.add(b)
            if len(resident) > self.capacity:
                raise PlanMismatch(f"step {i}: {len(resident)} buckets resident > {self.capacity}")
            if i % 2 == 1 and seq[i - 1] not in resident:
                raise PlanMismatch(f"step {i}: task partner {seq[i - 1]} not resident")
            peak = max(peak, len(resident))
        return peak


def _next_use(seq: list[int]) -> list[int]:
    """Index of the following access to the same bucket, ``len(seq)`` if none."""
    INF = len(seq)
    positions: dict[int, list[int]] = {}
    for i, b in enumerate(seq):  # pass 1: access times per bucket
        positions.setdefault(b, []).append(i)
    nxt = [INF] * len(seq)
    for pos in positions.values():
        for a, b in zip(pos, pos[1:]):
            nxt[a] = b
    return nxt


def _belady(seq: list[int], C: int, paired: bool) -> EvictionPlan:
    n = len(seq)
    nxt = _next_use(seq)
    action = np.zeros(n, np.int8)
    victim = np.full(n, -1, np.int64)
    cur: dict[int, int] = {}   # resident bucket -> next access index
    heap: list[tuple[int, int]] = []
    for i, b in enumerate(seq):  # pass 2: walk the sequence
        if b in cur:
            action[i] = HIT
        else:
            action[i] = LOAD
            if len(cur) == C:
                pin = seq[i - 1] if paired and i % 2 == 1 else None
                held = []
                while True:
                    negnext, v = heapq.heappop(heap)
                    if v not in cur or cur[v] != -negnext:
                        continue
                    if v == pin:
                        held.append((negnext, v))
                        continue
                    break
                for h in held:
                    heapq.heappush(heap, h)
                del cur[v]
                victim[i] = v
        cur[b] = nxt[i]
        heapq.heappush(heap, (-nxt[i], b))
    return EvictionPlan(action, victim, C)


def belady_plan(access_seq, M: int, C: int, paired: bool = False) -> EvictionPlan:
    """Evict the resident bucket whose next access lies farthest ahead.

    Buckets never accessed again count as infinitely far; ties go to the
    lowest id.  With ``paired`` the sequence is read as consecutive task
    pairs and the first bucket of a task is never evicted to load the
    second.
    """
    if C < 2:
        raise CapacityTooSmall(f"cache must hold at least 2 buckets, got {C}")
    seq = [int(b) for b in np.asarray(access_seq).tolist()]
    if seq and (min(seq) < 0 or max(seq) >= M):
        raise ValueError("bucket id out of range")
    return _belady(seq, C, paired)


@dataclass
class SimResult:
    policy: str
    misses: int
    hits: int

    @property
    def hit_rate(self) -> float:
        n = self.misses + self.hits
        return 1.0 if n == 0 else self.hits / n


def simulate_policy(access_seq, C: int, policy: str = "lru", paired: bool = False) -> SimResult:
    """Replay ``access_seq`` through a cache of ``C`` buckets."""
    if C < 1:
        raise CapacityTooSmall("cache must hold at least one bucket")
    policy = policy.lower()
    seq = [int(b) for b in np.asarray(access_seq).tolist()]
    if policy == "belady":
        plan = _belady(seq, C, paired)
        return SimResult(policy, plan.misses, plan.hits)
    if policy not in ("lru", "fifo"):
        raise ValueError(f"unknown policy {policy!r}")
    cache: OrderedDict[int, None] = OrderedDict()
    misses = 0
    for i, b in enumerate(seq):
        if b in cache:
            if policy == "lru":
                cache.move_to_end(b)
            continue
        misses += 1
        if len(cache) == C:
            pin = seq[i - 1] if paired and i % 2 == 1 and C > 1 else None
            for v in cache:
                if v != pin:
                    break
            del cache[v]
        cache[b] = None
    return SimResult(policy, misses, len(seq) - misses)


def mecc_optimal(graph, C: int, max_nodes: int = 8) -> int:
    """Exact minimum number of loads covering every edge with a ``C``-slot cache.

    ``graph`` is a :class:`BucketGraph` or ``(n, edges)``.  An edge is
    covered when both endpoints are resident at once.  Breadth-first search
    over (cache contents, covered edges); only nodes with an uncovered edge
    are worth loading.
    """
    if isinstance(graph, BucketGraph):
        n, edges = graph.M, [tuple(e) for e in graph.edges().tolist()]
    else:
        n, edges = graph
        edges = [tuple(sorted(e)) for e in edges if e[0] != e[1]]
    if n > max_nodes:
        raise TooLarge(f"{n} nodes exceeds exhaustive limit {max_nodes}")
    if C < 2 and edges:
        raise CapacityTooSmall("an edge needs two resident buckets")
    edges = sorted(set(edges))
    full = (1 << len(edges)) - 1
    if full == 0:
        return 0
    inc = [0] * n  # incident edge mask per node
    for k, (a, b) in enumerate(edges):
        inc[a] |= 1 << k
        inc[b] |= 1 << k
    nodes_mask = [[0] * n for _ in range(n)]
    for k, (a, b) in enumerate(edges):
        nodes_mask[a][b] |= 1 << k
        nodes_mask[b][a] |= 1 << k

    start = (0, 0)
    frontier = [start]
    seen = {start}
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for cache, cov in frontier:
            members = [v for v in range(n) if cache >> v & 1]
            for x in range(n):
                if cache >> x & 1 or not (inc[x] & ~cov):
                    continue
                options = [cache] if len(members) < C else [cache & ~(1 << y) for y in members]
                for base in options:
                    new_cov = cov
                    for y in range(n):
                        if base >> y & 1:
                            new_cov |= nodes_mask[x][y]
                    if new_cov == full:
                        return depth
                    state = (base | 1 << x, new_cov)
                    if state not in seen:
                        seen.add(state)
                        nxt.append(state)
        frontier = nxt
    raise RuntimeError("edge set cannot be covered")


def capacity_in_buckets(cache_bytes: int, max_bucket_bytes: int) -> int:
    return int(cache_bytes // max(1, max_bucket_bytes))


def orchestrate(graph: BucketGraph, C: int, use_reorder: bool = True) -> tuple[TaskSchedule, EvictionPlan]:
    """Reorder (or keep id order), build the schedule and its Belady plan."""
    if use_reorder:
        r = reorder(graph, C)
        perm, w = r.perm, r.window
    else:
        perm, w = np.arange(graph.M), window_size(graph, C)
    sched = make_schedule(graph, perm, w)
    plan = belady_plan(sched.access_seq, graph.M, C, paired=True)
    return sched, plan


def save_plan(path, schedule: TaskSchedule, plan: EvictionPlan) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(_PLAN_HEAD, PLAN_MAGIC, PLAN_VERSION, schedule.M, plan.capacity,
                            schedule.window, len(schedule.tasks), schedule.graph_digest.encode()[:16].ljust(16, b"\0")))
        f.write(schedule.perm.astype("<i4").tobytes())
        f.write(schedule.tasks.astype("<i4").tobytes())
        f.write(plan.action.astype("i1").tobytes())
        f.write(plan.victim.astype("<i4").tobytes())


def load_plan(path) -> tuple[TaskSchedule, EvictionPlan]:
    raw = Path(path).read_bytes()
    magic, version, M, C, w, T, digest = struct.unpack_from(_PLAN_HEAD, raw)
    if magic != PLAN_MAGIC or version != PLAN_VERSION:
        raise FormatError(f"{path}: not a v{PLAN_VERSION} plan file")
    off = struct.calcsize(_PLAN_HEAD)
    if len(raw) != off + 4 * M + 8 * T + 2 * T + 8 * T:
        raise FormatError(f"{path}: size mismatch")
    perm = np.frombuffer(raw, "<i4", M, off).astype(np.int64)
    off += 4 * M
    tasks = np.frombuffer(raw, "<i4", 2 * T, off).astype(np.int64).reshape(T, 2)
    off += 8 * T
    action = np.frombuffer(raw, "i1", 2 * T, off).astype(np.int8)
    off += 2 * T
    victim = np.frombuffer(raw, "<i4", 2 * T, off).astype(np.int64)
    sched = TaskSchedule(perm, tasks, w, digest.rstrip(b"\0").decode())
    return sched, EvictionPlan(action, victim, C)
