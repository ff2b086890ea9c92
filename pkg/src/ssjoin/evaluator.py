"""Ground truth and metrics: brute-force join, recall, precision, eps calibration."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetHandle, load_all, read_vectors, sample_ids, stream_blocks
from .errors import TooLarge
from .kernels import blocked_join, naive_join

log = logging.getLogger(__name__)


@dataclass
class PairSet:
    """Canonical ``(a < b)`` pair set with distances, sorted by ``(a, b)``."""
    a: np.ndarray
    b: np.ndarray
    dist: np.ndarray
    source: str = "engine"

    @classmethod
    def from_arrays(cls, a, b, dist, source: str = "engine") -> "PairSet":
        a = np.asarray(a, dtype=np.uint64)
        b = np.asarray(b, dtype=np.uint64)
        dist = np.asarray(dist, dtype=np.float64)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        keep = lo != hi
        lo, hi, dist = lo[keep], hi[keep], dist[keep]
        if len(lo) and hi.max() >= 2 ** 32:
            raise ValueError("ids must fit in 32 bits")
        keys = (lo << np.uint64(32)) | hi
        keys, first = np.unique(keys, return_index=True)
        return cls(lo[first], hi[first], dist[first], source)

    @classmethod
    def from_records(cls, recs: np.ndarray, source: str = "engine") -> "PairSet":
        return cls.from_arrays(recs["a"], recs["b"], recs["dist"], source)

    @property
    def keys(self) -> np.ndarray:
        return (self.a << np.uint64(32)) | self.b

    def __len__(self) -> int:
        return len(self.a)

    def __eq__(self, other) -> bool:
        return isinstance(other, PairSet) and np.array_equal(self.keys, other.keys)


def brute_force_join(handle_or_X, epsilon: float, max_n: int = 200_000,
                     method: str = "blocked") -> PairSet:
    """Exact self-join by exhaustive comparison.

    ``method="blocked"`` screens row blocks with a GEMM expansion;
    ``method="naive"`` is a plain double loop.  Both decide membership on
    float64 differences.
    """
    X = load_all(handle_or_X) if isinstance(handle_or_X, DatasetHandle) else np.asarray(handle_or_X)
    if len(X) > max_n:
        raise TooLarge(f"{len(X)} vectors exceeds brute-force limit {max_n}")
    if method == "blocked":
        ii, jj, d2 = blocked_join(X, epsilon)
    elif method == "naive":
        ii, jj, d2 = naive_join(X, epsilon)
    else:
        raise ValueError(f"unknown method {method!r}")
    return PairSet.from_arrays(ii, jj, np.sqrt(d2), source="oracle")


def recall(engine: PairSet, oracle: PairSet) -> float:
    """``|R & R'| / |R|``; 1.0 when the oracle set is empty."""
    if len(oracle) == 0:
        return 1.0
    hit = np.intersect1d(engine.keys, oracle.keys, assume_unique=True)
    return len(hit) / len(oracle)


@dataclass
class PrecisionReport:
    precision: float
    violations: int
    max_excess: float
    distance_mismatches: int


def check_precision(engine: PairSet, X: np.ndarray, epsilon: float, rtol: float = 1e-4) -> PrecisionReport:
    """Re-verify every engine pair against raw vectors."""
    if len(engine) == 0:
        return PrecisionReport(1.0, 0, 0.0, 0)
    a = engine.a.astype(np.int64)
    b = engine.b.astype(np.int64)
    diff = X[a].astype(np.float64) - X[b].astype(np.float64)
    true = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    bad = true > epsilon
    mism = int((np.abs(true - engine.dist) > rtol * np.maximum(true, 1e-12)).sum())
    if mism:
        warnings.warn(f"{mism} engine distances differ from recomputed ones by > {rtol} relative")
    excess = float((true - epsilon)[bad].max()) if bad.any() else 0.0
    return PrecisionReport(1.0 - bad.sum() / len(engine), int(bad.sum()), excess, mism)


@dataclass
class Calibration:
    epsilon: float
    achieved_avg: float
    sample_size: int


def calibrate_epsilon(handle: DatasetHandle, target_avg_neighbors: float, sample_size: int = 1000,
                      seed: int = 0, block_rows: int | None = None) -> Calibration:
    """Pick eps so sampled vectors have ``target_avg_neighbors`` eps-neighbours on average.

    Distances from the sampled vectors to the full dataset are streamed;
    the ``target * sample_size`` smallest (self excluded) are kept and the
    largest of them becomes eps.
    """
    if sample_size > handle.count:
        raise TooLarge(f"sample of {sample_size} exceeds dataset size {handle.count}")
    ids = sample_ids(handle.count, sample_size, seed)
    S = read_vectors(handle, ids).astype(np.float64)
    s_norm = np.einsum("ij,ij->i", S, S)
    K = int(round(target_avg_neighbors * sample_size))
    rows = block_rows or max(256, (1 << 22) // sample_size)
    pool = np.empty(0, np.float64)
    min_nonzero = np.inf
    for blk in stream_blocks(handle, max(4096, rows * handle.row_bytes)):
        B = blk.vectors.astype(np.float64)
        d2 = s_norm[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * (S @ B.T)
        np.maximum(d2, 0.0, out=d2)
        inside = (ids >= blk.start_id) & (ids < blk.start_id + len(B))
        d2[np.flatnonzero(inside), ids[inside] - blk.start_id] = np.inf
        pos = d2[d2 > 0]
        if len(pos):
            min_nonzero = min(min_nonzero, float(pos.min()))
        if K == 0:
            continue
        flat = d2.ravel()
        if len(pool) >= K:
            flat = flat[flat < pool.max()]
        pool = np.concatenate([pool, flat])
        if len(pool) > K:
            pool = np.partition(pool, K - 1)[:K]
    if K == 0:
        eps = 0.5 * float(np.sqrt(min_nonzero))
        return Calibration(eps, 0.0, sample_size)
    eps = float(np.sqrt(pool.max()))
    achieved = float((pool <= pool.max()).sum()) / sample_size
    return Calibration(eps, achieved, sample_size)


def neighbor_average(handle: DatasetHandle, epsilon: float, sample_size: int, seed: int) -> float:
    """Mean number of eps-neighbours (self excluded) over a random sample."""
    ids = sample_ids(handle.count, sample_size, seed)
    S = read_vectors(handle, ids).astype(np.float64)
    s_norm = np.einsum("ij,ij->i", S, S)
    total = 0
    rows = max(256, (1 << 22) // sample_size)
    for blk in stream_blocks(handle, max(4096, rows * handle.row_bytes)):
        B = blk.vectors.astype(np.float64)
        d2 = s_norm[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * (S @ B.T)
        total += int((d2 <= epsilon ** 2).sum())
    return (total - sample_size) / sample_size
