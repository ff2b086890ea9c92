"""Memory-bounded partitioning of a dataset into buckets on disk.

Three sequential scans of the input:

1. gather randomly sampled vectors as bucket centres;
2. assign every vector to its nearest centre through the centre index,
   tracking per-bucket counts and radii and spilling the assignment to a
   small side file;
3. re-stream the dataset with the assignment and write each vector into
   its bucket's extent through a per-bucket write buffer.

Counts are known before the third scan, so every bucket gets one
contiguous, page-aligned extent and no byte is written twice.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .center_index import CenterIndex
from .dataset import DEFAULT_BLOCK_BYTES, PAGE_SIZE, DatasetHandle, sample_ids, stream_blocks
from .directio import ExtentReader, round_up
from .errors import BudgetInfeasible, CorruptExtent, FormatError, IoFailure, MTooLarge
from .memory import MemoryAccountant

log = logging.getLogger(__name__)

BUFFER_QUANTUM = 2 * PAGE_SIZE
BKM_MAGIC = b"SSJBKM\0\0"
BKM_VERSION = 1
_BKM_HEAD = "<8sIIIIQII"


def default_num_buckets(N: int) -> int:
    return max(1, int(round(N / 1000)))


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def select_centers(handle: DatasetHandle, M: int, seed: int,
                   block_bytes: int = DEFAULT_BLOCK_BYTES) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``M`` ids and collect those rows in one streaming pass.

    Returns ``(center_ids, centers)``.
    """
    if M > handle.count:
        raise MTooLarge(f"M={M} exceeds dataset size {handle.count}")
    ids = sample_ids(handle.count, M, seed)
    centers = np.empty((M, handle.dim), np.float32)
    for blk in stream_blocks(handle, block_bytes):
        lo = np.searchsorted(ids, blk.start_id)
        hi = np.searchsorted(ids, blk.start_id + len(blk.vectors))
        if hi > lo:
            centers[lo:hi] = blk.vectors[ids[lo:hi] - blk.start_id]
    return ids, centers


@dataclass
class BucketPayload:
    ids: np.ndarray       # uint64 original ids
    vectors: np.ndarray   # (count, d) float32
    nbytes: int           # padded extent bytes read

    @property
    def count(self) -> int:
        return len(self.ids)


@dataclass
class BucketStore:
    """Bucket-major data file plus per-bucket metadata.

    Store buckets may be sub-buckets of one centre (oversized buckets are
    split); ``parent`` maps each store bucket to its centre id.
    """
    path: Path                 # .bks data file
    dim: int
    N: int
    centers: np.ndarray        # (Mc, d) float32, one row per centre
    parent: np.ndarray         # (M,) int32
    radius: np.ndarray         # (M,) float32
    count: np.ndarray          # (M,) int64
    offset: np.ndarray         # (M,) int64
    length: np.ndarray         # (M,) int64
    center_ids: np.ndarray | None = None
    layout_stats: dict = field(default_factory=dict)
    page_size: int = PAGE_SIZE

    @property
    def M(self) -> int:
        return len(self.parent)

    @property
    def num_centers(self) -> int:
        return len(self.centers)

    @property
    def record_bytes(self) -> int:
        return 8 + 4 * self.dim

    @property
    def meta_path(self) -> Path:
        return self.path.with_suffix(".bkm")

    @property
    def max_bucket_bytes(self) -> int:
        return int(self.length.max(initial=0))

    def center(self, b: int) -> np.ndarray:
        return self.centers[self.parent[b]]

    def read_bucket(self, b: int, reader: ExtentReader | None = None) -> BucketPayload:
        """Load one bucket with a single aligned sequential read."""
        if not 0 <= b < self.M:
            raise IndexError(f"bucket {b} out of range")
        own = reader is None
        reader = reader or ExtentReader(self.path)
        try:
            length = int(self.length[b])
            raw = reader.read(int(self.offset[b]), length)
        finally:
            if own:
                reader.close()
        return decode_extent(raw, int(self.count[b]), self.dim, length, self.N, b)

    @property
    def id_map(self) -> np.ndarray:
        """Original id of every slot, bucket-major."""
        out = []
        with ExtentReader(self.path) as r:
            for b in range(self.M):
                out.append(self.read_bucket(b, r).ids)
        return np.concatenate(out) if out else np.empty(0, np.uint64)

    def save_meta(self) -> None:
        head = struct.pack(_BKM_HEAD, BKM_MAGIC, BKM_VERSION, self.M, self.num_centers,
                           self.dim, self.N, self.record_bytes, self.page_size)
        cids = self.center_ids if self.center_ids is not None else np.full(self.num_centers, -1)
        tmp = self.meta_path.with_suffix(".bkm.tmp")
        with open(tmp, "wb") as f:
            f.write(head)
            for arr, dt in ((self.centers, "<f4"), (cids, "<i8"), (self.parent, "<i4"),
                            (self.radius, "<f4"), (self.count, "<i8"),
                            (self.offset, "<i8"), (self.length, "<i8")):
                f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        os.replace(tmp, self.meta_path)

    @classmethod
    def open(cls, path) -> "BucketStore":
        """Open a store from its ``.bks`` or ``.bkm`` path."""
        path = Path(path)
        meta = path.with_suffix(".bkm")
        raw = meta.read_bytes()
        magic, version, M, Mc, d, N, rec, page = struct.unpack_from(_BKM_HEAD, raw)
        if magic != BKM_MAGIC or version != BKM_VERSION:
            raise FormatError(f"{meta}: not a v{BKM_VERSION} bucket metadata file")
        if rec != 8 + 4 * d:
            raise FormatError(f"{meta}: record size {rec} inconsistent with dim {d}")
        off = struct.calcsize(_BKM_HEAD)
        arrs = []
        for n, dt in ((Mc * d, "<f4"), (Mc, "<i8"), (M, "<i4"), (M, "<f4"),
                      (M, "<i8"), (M, "<i8"), (M, "<i8")):
            a = np.frombuffer(raw, dtype=dt, count=n, offset=off)
            arrs.append(a.astype(dt[1:]))
            off += a.nbytes
        if off != len(raw):
            raise FormatError(f"{meta}: size mismatch")
        bks = path.with_suffix(".bks")
        expect = int(arrs[6].sum())
        if bks.stat().st_size != expect:
            raise FormatError(f"{bks}: {bks.stat().st_size} B, metadata expects {expect} B")
        return cls(bks, d, N, arrs[0].reshape(Mc, d), arrs[2], arrs[3], arrs[4],
                   arrs[5], arrs[6], arrs[1], page_size=page)


def decode_extent(raw, count: int, dim: int, length: int, N: int, b: int = -1) -> BucketPayload:
    rec = record_dtype(dim)
    if count * rec.itemsize > length:
        raise CorruptExtent(f"bucket {b}: {count} records do not fit in {length} B")
    recs = np.frombuffer(raw, dtype=rec, count=count)
    tail = np.frombuffer(raw, dtype=np.uint8, offset=count * rec.itemsize)
    if tail.any():
        raise CorruptExtent(f"bucket {b}: non-zero bytes after {count} records")
    ids = recs["id"].copy()
    if count and int(ids.max()) >= N:
        raise CorruptExtent(f"bucket {b}: id {int(ids.max())} out of range")
    return BucketPayload(ids, np.ascontiguousarray(recs["v"]), length)


def _exact_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x.astype(np.float64) - c.astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _round_up_f32(r: np.ndarray) -> np.ndarray:
    """float32 values never below the float64 input."""
    out = r.astype(np.float32)
    low = out.astype(np.float64) < r
    out[low] = np.nextafter(out[low], np.float32(np.inf))
    return out


def assign_and_layout(handle: DatasetHandle, index: CenterIndex, memory_budget: int, work_dir,
                      name: str = "store", max_bucket_bytes: int | None = None,
                      ef_search: int = 64, center_ids: np.ndarray | None = None,
                      block_bytes: int = DEFAULT_BLOCK_BYTES) -> BucketStore:
    """Assign vectors to centres and write the bucket-major store.

    ``max_bucket_bytes`` splits any bucket whose padded extent would exceed
    it into equal chained sub-buckets sharing the centre and radius.
    Peak tracked memory stays within ``memory_budget`` or
    :class:`BudgetInfeasible` / :class:`BudgetExceeded` is raised.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    Mc, d = index.size, handle.dim
    if index.dim != d:
        raise ValueError(f"index dim {index.dim} != dataset dim {d}")
    rec = record_dtype(d)
    rb = rec.itemsize

    mem = MemoryAccountant(memory_budget, "bucketize")
    fixed = index.nbytes + Mc * (8 + 8 + 4)  # index + counts/radius/cursors
    buffers = Mc * BUFFER_QUANTUM
    # per-vector transient cost of a block: raw + float32 + search output + record + assignment
    per_vec = handle.row_bytes + 4 * d + 12 + 8 + rb + 8
    room = memory_budget - fixed - buffers
    min_block = max(PAGE_SIZE, handle.row_bytes)
    if room < (min_block // handle.row_bytes) * per_vec:
        raise BudgetInfeasible(
            f"budget {memory_budget} B cannot hold index ({index.nbytes} B), "
            f"{Mc} write buffers ({buffers} B) and one streaming block"
        )
    vecs_per_block = max(min_block // handle.row_bytes, min(block_bytes // handle.row_bytes, room // per_vec))
    blk_bytes = max(min_block, vecs_per_block * handle.row_bytes)
    block_cost = vecs_per_block * per_vec
    mem.reserve(fixed, "index and per-bucket counters")

    # pass 2: assignment
    asg_path = work_dir / f"{name}.asg"
    counts = np.zeros(Mc, np.int64)
    radius64 = np.zeros(Mc, np.float64)
    written = 0
    try:
        with open(asg_path, "wb") as asg:
            for blk in stream_blocks(handle, blk_bytes):
                mem.reserve(block_cost, "assignment block")
                ids, _ = index.search_batch(blk.vectors, 1, ef_search)
                a = ids[:, 0]
                dist = _exact_dist(blk.vectors, index.centers[a])
                counts += np.bincount(a, minlength=Mc)
                np.maximum.at(radius64, a, dist)
                buf = a.astype("<u4").tobytes()
                asg.write(buf)
                written += len(buf)
                mem.release(block_cost)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    # extent planning, with optional splitting of oversized buckets
    per_sub = None
    if max_bucket_bytes is not None:
        per_sub = max(1, (int(max_bucket_bytes) // PAGE_SIZE * PAGE_SIZE) // rb)
    nsub = np.ones(Mc, np.int64)
    if per_sub is not None:
        nsub = np.maximum(1, -(-counts // per_sub))
    chunk = np.maximum(1, -(-counts // nsub))
    first = np.concatenate([[0], np.cumsum(nsub)[:-1]])
    M = int(nsub.sum())
    parent = np.repeat(np.arange(Mc, dtype=np.int32), nsub)
    sub_rank = np.arange(M) - first[parent]
    scount = np.minimum(chunk[parent], counts[parent] - sub_rank * chunk[parent])
    scount = np.maximum(scount, 0)
    length = np.array([round_up(c * rb) for c in scount], np.int64)
    offset = np.concatenate([[0], np.cumsum(length)[:-1]]).astype(np.int64)
    radius = _round_up_f32(radius64)

    # pass 3: write extents through per-bucket buffers
    bks_path = work_dir / f"{name}.bks"
    mem.reserve(buffers, "write buffers")
    bufs: dict[int, bytearray] = {}
    cursor = offset.copy()
    seen = np.zeros(Mc, np.int64)
    try:
        fd = os.open(bks_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.ftruncate(fd, int(length.sum()))

            def flush(b: int, data) -> None:
                nonlocal written
                n = os.pwrite(fd, data, int(cursor[b]))
                if n != len(data):
                    raise IoFailure(f"short write to bucket {b}")
                cursor[b] += n
                written += n

            with open(asg_path, "rb") as asg:
                for blk in stream_blocks(handle, blk_bytes):
                    mem.reserve(block_cost, "layout block")
                    n = len(blk.vectors)
                    a = np.frombuffer(asg.read(4 * n), dtype="<u4").astype(np.int64)
                    order = np.argsort(a, kind="stable")
                    a_sorted = a[order]
                    starts = np.searchsorted(a_sorted, a_sorted, side="left")
                    rank = np.empty(n, np.int64)
                    rank[order] = np.arange(n) - starts + seen[a_sorted]
                    seen += np.bincount(a, minlength=Mc)
                    sb = first[a] + rank // chunk[a]
                    recs = np.empty(n, rec)
                    recs["id"] = blk.ids
                    recs["v"] = blk.vectors
                    order = np.argsort(sb, kind="stable")
                    recs = recs[order]
                    sb = sb[order]
                    cuts = np.flatnonzero(np.diff(sb)) + 1
                    for lo, hi in zip(np.concatenate([[0], cuts]), np.concatenate([cuts, [n]])):
                        b = int(sb[lo])
                        data = memoryview(recs[lo:hi].tobytes())
                        buf = bufs.setdefault(b, bytearray())
                        take = min(len(data), BUFFER_QUANTUM - len(buf))
                        buf += data[:take]
                        data = data[take:]
                        if len(buf) == BUFFER_QUANTUM:
                            flush(b, buf)
                            buf.clear()
                            while len(data) >= BUFFER_QUANTUM:
                                flush(b, data[:BUFFER_QUANTUM])
                                data = data[BUFFER_QUANTUM:]
                            buf += data
                    mem.release(block_cost)
            for b, buf in bufs.items():
                if buf:
                    flush(b, bytes(buf) + bytes(round_up(len(buf)) - len(buf)))
            os.fsync(fd)
        finally:
            os.close(fd)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    finally:
        mem.release(buffers)
        if asg_path.exists():
            asg_path.unlink()

    if not np.array_equal(cursor, offset + length):
        raise IoFailure("layout did not fill every extent exactly")
    data_bytes = handle.count * rb
    padded = int(length.sum())
    store = BucketStore(
        bks_path, d, handle.count, index.centers.copy(), parent, radius[parent],
        scount.astype(np.int64), offset, length, center_ids,
        layout_stats={
            "bytes_written": written,
            "data_bytes": data_bytes,
            "padded_bytes": padded,
            "write_amp": written / padded if padded else 1.0,
            "peak_memory": mem.peak,
            "memory_budget": int(memory_budget),
            "block_bytes": blk_bytes,
            "num_centers": Mc,
            "num_buckets": M,
        },
    )
    store.save_meta()
    log.info("bucketized %d vectors into %d buckets (%d centres), %d B written",
             handle.count, M, Mc, written)
    return store
