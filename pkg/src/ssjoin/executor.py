"""Join execution: replay the plan, load buckets, verify pairs, emit results.

A loader thread walks the plan's loads in order and reads each bucket as
soon as the slot it will occupy has been vacated.  A victim is evicted
right after its last use before the load that displaces it, so prefetching
never raises the resident set above the plan's bound.  Verification runs on
the calling thread; the numba kernels release the GIL so reads overlap with
compute.
"""
from __future__ import annotations

import io
import json
import logging
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bucketizer import BucketPayload, BucketStore, decode_extent
from .directio import ExtentReader
from .errors import FormatError, IoFailure, PlanMismatch
from .kernels import cross_pairs, self_pairs
from .memory import MemoryAccountant
from .orchestrator import HIT, LOAD, EvictionPlan, TaskSchedule, capacity_in_buckets

log = logging.getLogger(__name__)

PAIRS_MAGIC = b"SSJPAIRS"
PAIRS_VERSION = 1
_PAIRS_HEAD = "<8sIdQ"
PAIRS_HEADER_BYTES = struct.calcsize(_PAIRS_HEAD)
PAIR_DTYPE = np.dtype([("a", "<u8"), ("b", "<u8"), ("dist", "<f4")])
STATS_SCHEMA = 1


def _clamp_f32(dist64: np.ndarray, eps: float) -> np.ndarray:
    """float32 distances that never exceed ``eps``."""
    out = dist64.astype(np.float32)
    over = out.astype(np.float64) > eps
    out[over] = np.nextafter(out[over], np.float32(0))
    return out


def verify_pair(a: BucketPayload, b: BucketPayload | None, epsilon: float,
                same_bucket: bool = False) -> tuple[np.ndarray, int]:
    """Exact verification of one bucket pair.

    Returns ``(pairs, dc)``: canonical ``(a < b)`` records and the number of
    distance computations.
    """
    if same_bucket or b is None:
        ii, jj, d2 = self_pairs(a.vectors, epsilon)
        n = a.count
        dc = n * (n - 1) // 2
        ia, ib = a.ids[ii], a.ids[jj]
    else:
        ii, jj, d2 = cross_pairs(a.vectors, b.vectors, epsilon)
        dc = a.count * b.count
        ia, ib = a.ids[ii], b.ids[jj]
    out = np.empty(len(ii), PAIR_DTYPE)
    out["a"] = np.minimum(ia, ib)
    out["b"] = np.maximum(ia, ib)
    out["dist"] = _clamp_f32(np.sqrt(d2), epsilon)
    return out, dc


class PairWriter:
    """Buffered writer for ``.pairs`` files: header then 20-byte records."""

    def __init__(self, path, epsilon: float, N: int, flush_bytes: int = 1 << 20):
        self.path = Path(path)
        self.flush_bytes = max(1 << 20, flush_bytes)
        self.count = 0
        self._buf = io.BytesIO()
        try:
            self._f = open(self.path, "wb")
            self._f.write(struct.pack(_PAIRS_HEAD, PAIRS_MAGIC, PAIRS_VERSION, float(epsilon), int(N)))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def write(self, pairs: np.ndarray) -> int:
        data = np.ascontiguousarray(pairs, dtype=PAIR_DTYPE).tobytes()
        self._buf.write(data)
        self.count += len(pairs)
        if self._buf.tell() >= self.flush_bytes:
            self.flush()
        return len(data)

    def flush(self) -> None:
        try:
            self._f.write(self._buf.getvalue())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self._buf = io.BytesIO()

    def close(self) -> None:
        if self._f is not None:
            self.flush()
            self._f.close()
            self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_results(sink: PairWriter, pairs: np.ndarray) -> int:
    return sink.write(pairs)


def read_pairs(path) -> tuple[float, int, np.ndarray]:
    """Returns ``(epsilon, N, records)``."""
    raw = Path(path).read_bytes()
    if len(raw) < PAIRS_HEADER_BYTES:
        raise FormatError(f"{path}: truncated header")
    magic, version, eps, N = struct.unpack_from(_PAIRS_HEAD, raw)
    if magic != PAIRS_MAGIC or version != PAIRS_VERSION:
        raise FormatError(f"{path}: not a v{PAIRS_VERSION} pairs file")
    body = len(raw) - PAIRS_HEADER_BYTES
    if body % PAIR_DTYPE.itemsize:
        raise FormatError(f"{path}: partial record")
    recs = np.frombuffer(raw, PAIR_DTYPE, body // PAIR_DTYPE.itemsize, PAIRS_HEADER_BYTES).copy()
    return eps, N, recs


@dataclass
class RunStats:
    bytes_total: int = 0
    bytes_useful: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    planned_misses: int = 0
    distance_computations: int = 0
    results: int = 0
    tasks: int = 0
    capacity_buckets: int = 0
    peak_resident_bytes: int = 0
    cache_bytes: int = 0
    direct_io: bool = False
    phase_seconds: dict = field(default_factory=dict)

    @property
    def amp(self) -> float:
        return self.bytes_total / self.bytes_useful if self.bytes_useful else 1.0

    @property
    def hit_rate(self) -> float:
        n = self.cache_hits + self.cache_misses
        return self.cache_hits / n if n else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amp"] = self.amp
        d["hit_rate"] = self.hit_rate
        d["schema"] = STATS_SCHEMA
        return d

    def to_text(self) -> str:
        d = self.to_dict()
        phases = d.pop("phase_seconds")
        lines = [f"{k}={v}" for k, v in d.items()]
        lines += [f"seconds_{k}={v:.3f}" for k, v in phases.items()]
        return "\n".join(lines)

    CSV_FIELDS = ("schema", "bytes_total", "bytes_useful", "amp", "cache_hits", "cache_misses",
                  "hit_rate", "distance_computations", "results", "tasks", "capacity_buckets",
                  "peak_resident_bytes", "cache_bytes", "direct_io",
                  "seconds_bucketize", "seconds_graph", "seconds_orchestrate", "seconds_execute")

    def csv_row(self) -> list:
        d = self.to_dict()
        for k in ("bucketize", "graph", "orchestrate", "execute"):
            d[f"seconds_{k}"] = round(self.phase_seconds.get(k, 0.0), 4)
        return [d[k] for k in self.CSV_FIELDS]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _Loader(threading.Thread):
    """Reads the plan's loads in order, gated by slot release and depth."""

    def __init__(self, store, reader, loads, mem, depth):
        super().__init__(daemon=True)
        self.store, self.reader, self.loads, self.mem = store, reader, loads, mem
        self.depth = depth
        self.cond = threading.Condition()
        self.ready: dict[int, BucketPayload] = {}   # load index -> payload
        self.released: set[int] = set()             # load indices whose victim is gone
        self.consumed = 0                           # loads taken by the consumer
        self.error: BaseException | None = None
        self.stop = False

    def run(self):
        try:
            for k, (_, b, victim) in enumerate(self.loads):
                with self.cond:
                    while not self.stop and not (
                        (victim < 0 or k in self.released) and k < self.consumed + self.depth
                    ):
                        self.cond.wait()
                    if self.stop:
                        return
                length = int(self.store.length[b])
                self.mem.reserve(length, f"bucket {b}")
                raw = self.reader.read(int(self.store.offset[b]), length)
                payload = decode_extent(raw, int(self.store.count[b]), self.store.dim, length,
                                        self.store.N, b)
                with self.cond:
                    self.ready[k] = payload
                    self.cond.notify_all()
        except BaseException as exc:  # surfaced to the consumer
            with self.cond:
                self.error = exc
                self.cond.notify_all()

    def take(self, k: int) -> BucketPayload:
        with self.cond:
            while k not in self.ready and self.error is None:
                self.cond.wait()
            if self.error is not None:
                raise self.error
            self.consumed = k + 1
            self.cond.notify_all()
            return self.ready.pop(k)

    def release(self, k: int) -> None:
        with self.cond:
            self.released.add(k)
            self.cond.notify_all()

    def shutdown(self):
        with self.cond:
            self.stop = True
            self.cond.notify_all()


def run_join(store: BucketStore, schedule: TaskSchedule, plan: EvictionPlan, epsilon: float,
             sink: PairWriter | None, cache_bytes: int, prefetch_depth: int = 2,
             graph_digest: str | None = None, direct: bool = True) -> RunStats:
    """Execute every task of ``schedule`` under ``plan``.

    Misses and hits follow the plan exactly; resident bucket bytes are
    charged to an accountant capped at ``cache_bytes``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    seq = schedule.access_seq
    if schedule.M != store.M:
        raise PlanMismatch(f"schedule covers {schedule.M} buckets, store has {store.M}")
    if len(plan.action) != len(seq):
        raise PlanMismatch("plan length differs from access sequence")
    if graph_digest is not None and schedule.graph_digest and graph_digest != schedule.graph_digest:
        raise PlanMismatch("schedule was built for a different graph")
    if plan.capacity > capacity_in_buckets(cache_bytes, store.max_bucket_bytes):
        raise PlanMismatch(f"plan assumes {plan.capacity} slots; {cache_bytes} B holds fewer")

    seq_l = seq.tolist()
    # loads in order, and for each victim the task after which it can go
    loads = []
    last_access: dict[int, int] = {}
    release_after_task: dict[int, list[int]] = {}
    load_at_step: dict[int, int] = {}
    for i, b in enumerate(seq_l):
        if plan.action[i] == LOAD:
            v = int(plan.victim[i])
            k = len(loads)
            loads.append((i, b, v))
            load_at_step[i] = k
            if v >= 0:
                if v not in last_access:
                    raise PlanMismatch(f"step {i}: victim {v} was never loaded")
                if last_access[v] // 2 >= i // 2:
                    raise PlanMismatch(f"step {i}: plan evicts {v}, which the same task needs")
                release_after_task.setdefault(last_access[v] // 2, []).append(k)
        last_access[b] = i

    mem = MemoryAccountant(cache_bytes, "cache")
    stats = RunStats(tasks=len(schedule.tasks), capacity_buckets=plan.capacity,
                     planned_misses=plan.misses, cache_bytes=int(cache_bytes))
    resident: dict[int, BucketPayload] = {}
    t0 = time.perf_counter()
    reader = ExtentReader(store.path, direct=direct)
    stats.direct_io = reader.direct
    loader = _Loader(store, reader, loads, mem, max(1, prefetch_depth))
    loader.start()
    try:
        for t, (u, v) in enumerate(schedule.tasks.tolist()):
            for step, b in ((2 * t, u), (2 * t + 1, v)):
                if plan.action[step] == HIT:
                    if b not in resident:
                        raise PlanMismatch(f"step {step}: planned hit but bucket {b} not resident")
                    stats.cache_hits += 1
                else:
                    if b in resident:
                        raise PlanMismatch(f"step {step}: planned load but bucket {b} resident")
                    payload = loader.take(load_at_step[step])
                    resident[b] = payload
                    stats.cache_misses += 1
                    stats.bytes_total += payload.nbytes
                    stats.bytes_useful += payload.count * store.record_bytes
            pairs, dc = verify_pair(resident[u], resident[v], epsilon, same_bucket=(u == v))
            stats.distance_computations += dc
            stats.results += len(pairs)
            if sink is not None and len(pairs):
                sink.write(pairs)
            for k in release_after_task.get(t, ()):
                victim = loads[k][2]
                gone = resident.pop(victim)
                mem.release(gone.nbytes)
                loader.release(k)
    finally:
        loader.shutdown()
        loader.join()
        reader.close()
    if loader.error is not None:
        raise loader.error
    stats.peak_resident_bytes = mem.peak
    stats.phase_seconds["execute"] = time.perf_counter() - t0
    if stats.cache_misses != plan.misses:
        raise PlanMismatch(f"executed {stats.cache_misses} misses, plan has {plan.misses}")
    if reader.bytes_read != stats.bytes_total:
        raise IoFailure("byte accounting diverged from reader")
    return stats
