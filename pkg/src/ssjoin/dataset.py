"""Flat vector files: open, stream, sample, generate.

Two on-disk layouts are understood, both little-endian:

* ``fbin``  -- ``[u32 count][u32 dim]`` then ``count * dim`` elements, row-major
* ``fvecs`` -- repeated ``[i32 dim][dim elements]``

Elements are ``float32`` or ``uint8`` (``u8bin`` / ``bvecs``); uint8 data is
widened to float32 on load.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InconsistentDim, IoFailure, MTooLarge, SizeMismatch, UnsupportedElem

PAGE_SIZE = 4096
DEFAULT_BLOCK_BYTES = 64 << 20

_ELEMS = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
_EXT = {
    ".fbin": ("fbin", "float32"),
    ".u8bin": ("fbin", "uint8"),
    ".fvecs": ("fvecs", "float32"),
    ".bvecs": ("fvecs", "uint8"),
}


@dataclass(frozen=True)
class DatasetHandle:
    path: Path
    count: int
    dim: int
    elem: str = "float32"
    format: str = "fbin"

    @property
    def elem_size(self) -> int:
        return _ELEMS[self.elem].itemsize

    @property
    def header_bytes(self) -> int:
        return 8 if self.format == "fbin" else 0

    @property
    def row_bytes(self) -> int:
        """On-disk bytes per vector, including the fvecs dim prefix."""
        extra = 4 if self.format == "fvecs" else 0
        return extra + self.dim * self.elem_size

    @property
    def nbytes(self) -> int:
        return self.header_bytes + self.count * self.row_bytes

    @property
    def payload_bytes(self) -> int:
        """Size of the vectors alone as float32 (the "dataset size")."""
        return self.count * self.dim * 4


@dataclass
class VectorBlock:
    start_id: int
    vectors: np.ndarray

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.start_id, self.start_id + len(self.vectors), dtype=np.uint64)


def _resolve_format(path: Path, format: str | None, elem: str | None) -> tuple[str, str]:
    fmt_guess, elem_guess = _EXT.get(path.suffix.lower(), ("fbin", "float32"))
    format = format or fmt_guess
    elem = elem or elem_guess
    if format not in ("fbin", "fvecs"):
        raise ValueError(f"unknown format {format!r}")
    if elem not in _ELEMS:
        raise UnsupportedElem(f"element kind {elem!r} not supported")
    return format, elem


def open_dataset(path, format: str | None = None, elem: str | None = None) -> DatasetHandle:
    """Validate a vector file and return a handle describing it.

    ``format`` and ``elem`` default to what the file extension implies.
    Raises instead of guessing when the header disagrees with the file size.
    """
    path = Path(path)
    format, elem = _resolve_format(path, format, elem)
    try:
        size = path.stat().st_size
        with open(path, "rb") as f:
            head = f.read(8 if format == "fbin" else 4)
            if format == "fbin":
                if len(head) < 8:
                    raise SizeMismatch(f"{path}: truncated fbin header")
                count, dim = (int(v) for v in np.frombuffer(head, "<u4"))
                if count < 1 or dim < 1:
                    raise SizeMismatch(f"{path}: header declares count={count} dim={dim}")
                handle = DatasetHandle(path, count, dim, elem, format)
                if size != handle.nbytes:
                    raise SizeMismatch(
                        f"{path}: header implies {handle.nbytes} B, file has {size} B"
                    )
                return handle

            if len(head) < 4:
                raise SizeMismatch(f"{path}: empty fvecs file")
            dim = int(np.frombuffer(head, "<i4")[0])
            if dim < 1:
                raise InconsistentDim(f"{path}: first record declares dim={dim}")
            row = 4 + dim * _ELEMS[elem].itemsize
            if size % row:
                raise SizeMismatch(f"{path}: {size} B is not a multiple of record size {row}")
            count = size // row
            # every record header must agree; scan them in chunks
            f.seek(0)
            per_chunk = max(1, (16 << 20) // row)
            seen = 0
            while seen < count:
                n = min(per_chunk, count - seen)
                raw = np.frombuffer(f.read(n * row), dtype=np.uint8).reshape(n, row)
                dims = raw[:, :4].copy().view("<i4").ravel()
                if np.any(dims != dim):
                    bad = seen + int(np.flatnonzero(dims != dim)[0])
                    raise InconsistentDim(f"{path}: record {bad} declares dim={dims[bad - seen]}, expected {dim}")
                seen += n
            return DatasetHandle(path, count, dim, elem, format)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _decode_rows(handle: DatasetHandle, raw: bytes, n: int) -> np.ndarray:
    dt = _ELEMS[handle.elem]
    if handle.format == "fbin":
        out = np.frombuffer(raw, dtype=dt, count=n * handle.dim).reshape(n, handle.dim)
    else:
        rows = np.frombuffer(raw, dtype=np.uint8, count=n * handle.row_bytes).reshape(n, handle.row_bytes)
        out = rows[:, 4:].copy().view(dt).reshape(n, handle.dim)
    return np.ascontiguousarray(out, dtype=np.float32)


def stream_blocks(handle: DatasetHandle, block_bytes: int = DEFAULT_BLOCK_BYTES) -> Iterator[VectorBlock]:
    """Yield the dataset in id order as consecutive blocks of whole vectors.

    Each block occupies at most ``block_bytes`` on disk.  Reads are purely
    sequential.
    """
    if block_bytes < handle.row_bytes:
        raise ValueError(f"block_bytes={block_bytes} is smaller than one vector")
    per_block = block_bytes // handle.row_bytes
    try:
        with open(handle.path, "rb", buffering=0) as f:
            f.seek(handle.header_bytes)
            start = 0
            while start < handle.count:
                n = min(per_block, handle.count - start)
                want = n * handle.row_bytes
                buf = bytearray(want)
                view = memoryview(buf)
                got = 0
                while got < want:
                    k = f.readinto(view[got:])
                    if not k:
                        raise IoFailure(f"{handle.path}: unexpected EOF at vector {start}")
                    got += k
                yield VectorBlock(start, _decode_rows(handle, buf, n))
                start += n
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_vectors(handle: DatasetHandle, ids) -> np.ndarray:
    """Random-access read of selected rows (used by tests and small tools)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty((len(ids), handle.dim), dtype=np.float32)
    try:
        with open(handle.path, "rb") as f:
            for k, i in enumerate(ids):
                f.seek(handle.header_bytes + int(i) * handle.row_bytes)
                out[k] = _decode_rows(handle, f.read(handle.row_bytes), 1)[0]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return out


def load_all(handle: DatasetHandle) -> np.ndarray:
    """Whole dataset as one float32 array.  Desk-scale only."""
    blocks = [b.vectors for b in stream_blocks(handle, max(PAGE_SIZE, handle.nbytes))]
    return blocks[0] if len(blocks) == 1 else np.concatenate(blocks)


def sample_ids(N: int, M: int, seed: int) -> np.ndarray:
    """Draw ``M`` distinct ids from ``[0, N)`` with Floyd's algorithm, sorted.

    Memory is O(M); the id range is never materialised.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if M > N:
        raise MTooLarge(f"cannot sample {M} distinct ids from {N}")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, np.arange(N - M + 1, N + 1))
    chosen: set[int] = set()
    for j, t in zip(range(N - M, N), draws.tolist()):
        chosen.add(j if t in chosen else t)
    return np.array(sorted(chosen), dtype=np.int64)


def write_fbin(path, X: np.ndarray) -> DatasetHandle:
    X = np.ascontiguousarray(X)
    elem = "uint8" if X.dtype == np.uint8 else "float32"
    X = X.astype(_ELEMS[elem], copy=False)
    n, d = X.shape
    try:
        with open(path, "wb") as f:
            f.write(np.array([n, d], dtype="<u4").tobytes())
            f.write(X.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DatasetHandle(Path(path), n, d, elem, "fbin")


def write_fvecs(path, X: np.ndarray) -> DatasetHandle:
    X = np.ascontiguousarray(X)
    elem = "uint8" if X.dtype == np.uint8 else "float32"
    X = X.astype(_ELEMS[elem], copy=False)
    n, d = X.shape
    rows = np.empty((n, 4 + d * X.itemsize), dtype=np.uint8)
    rows[:, :4] = np.frombuffer(np.int32(d).astype("<i4").tobytes(), dtype=np.uint8)
    rows[:, 4:] = X.view(np.uint8).reshape(n, -1)
    try:
        with open(path, "wb") as f:
            f.write(rows.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DatasetHandle(Path(path), n, d, elem, "fvecs")


def gen_synthetic(N: int, d: int, clusters: int, spread: float, seed: int, path,
                  spread_max: float | None = None, box: float = 1.0, outliers: float = 0.0,
                  chunk: int = 1 << 16) -> DatasetHandle:
    """Write a Gaussian-mixture dataset in fbin format.

    Cluster centres are uniform in ``[0, box)^d``; each vector picks a
    cluster uniformly at random and adds isotropic noise.  The noise std is
    ``spread`` for every cluster, or log-uniform in ``[spread, spread_max]``
    per cluster when ``spread_max`` is given.  A fraction ``outliers`` of
    the vectors is background noise, uniform in the same cube.  Output is
    byte-identical for a given seed.
    """
    if clusters < 1:
        raise ValueError("clusters must be >= 1")
    if N < 1 or d < 1:
        raise ValueError("N and d must be >= 1")
    if spread < 0 or (spread_max is not None and spread_max < spread) or box <= 0:
        raise ValueError("need 0 <= spread <= spread_max and box > 0")
    if not 0.0 <= outliers <= 1.0:
        raise ValueError("outliers must be a fraction in [0, 1]")
    if spread_max is not None and spread_max != spread and spread <= 0:
        raise ValueError("a spread range needs spread > 0")
    rng = np.random.default_rng(seed)
    centers = box * rng.random((clusters, d))
    if spread_max is None or spread_max == spread:
        sigma = np.full(clusters, float(spread))
    else:
        sigma = np.exp(rng.uniform(np.log(spread), np.log(spread_max), clusters))
    tmp = Path(str(path) + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(np.array([N, d], dtype="<u4").tobytes())
            for start in range(0, N, chunk):
                n = min(chunk, N - start)
                labels = rng.integers(0, clusters, size=n)
                noise = rng.standard_normal((n, d))
                rows = centers[labels] + sigma[labels, None] * noise
                if outliers > 0:
                    bg = np.flatnonzero(rng.random(n) < outliers)
                    rows[bg] = box * rng.random((len(bg), d))
                f.write(rows.astype("<f4").tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DatasetHandle(Path(path), N, d, "float32", "fbin")
