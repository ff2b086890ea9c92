"""Pairwise distance kernels for bucket verification.

Every kernel compares squared L2 distances against ``eps**2``.  The fast
path accumulates in float32; any pair whose float32
value lands inside a small band around the threshold is re-decided in
float64, so every emitted pair satisfies ``dist <= eps`` in double precision.

Two implementations exist for each kernel: a numba loop and a chunked numpy
version.  ``SSJOIN_DISABLE_NUMBA=1`` selects numpy.
"""
from __future__ import annotations

import numpy as np

from ._accel import NUMBA_ENABLED, jit

# numpy fallback works on row chunks of at most this many float32 cells
_CHUNK_CELLS = 1 << 22


def threshold_band(eps2: float, dim: int) -> float:
    """Upper float32 cut-off guaranteeing no true eps-pair is rejected."""
    return eps2 * (1.0 + 4.0 * (dim + 2) * 2.0 ** -24) + 1e-30


@jit
def _sq32(a, b):
    d = a.shape[0]
    s0 = np.float32(0.0)
    s1 = np.float32(0.0)
    s2 = np.float32(0.0)
    s3 = np.float32(0.0)
    s4 = np.float32(0.0)
    s5 = np.float32(0.0)
    s6 = np.float32(0.0)
    s7 = np.float32(0.0)
    k = 0
    while k + 8 <= d:
        t0 = a[k] - b[k]
        t1 = a[k + 1] - b[k + 1]
        t2 = a[k + 2] - b[k + 2]
        t3 = a[k + 3] - b[k + 3]
        t4 = a[k + 4] - b[k + 4]
        t5 = a[k + 5] - b[k + 5]
        t6 = a[k + 6] - b[k + 6]
        t7 = a[k + 7] - b[k + 7]
        s0 += t0 * t0
        s1 += t1 * t1
        s2 += t2 * t2
        s3 += t3 * t3
        s4 += t4 * t4
        s5 += t5 * t5
        s6 += t6 * t6
        s7 += t7 * t7
        k += 8
    while k < d:
        t = a[k] - b[k]
        s0 += t * t
        k += 1
    return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7))


@jit
def _sq64(a, b):
    s = 0.0
    for k in range(a.shape[0]):
        t = np.float64(a[k]) - np.float64(b[k])
        s += t * t
    return s


@jit
def _cross_nb(A, BT, eps2, band, out_i, out_j, out_d):
    # B is passed transposed so the inner loop runs over contiguous B rows
    # and vectorises; sums stay sequential in k for every pair.
    cap = out_i.shape[0]
    d, nb = BT.shape
    acc = np.empty(nb, np.float32)
    n = 0
    for i in range(A.shape[0]):
        acc[:] = 0
        for k in range(d):
            a = A[i, k]
            row = BT[k]
            for j in range(nb):
                t = a - row[j]
                acc[j] += t * t
        for j in range(nb):
            if acc[j] <= band:
                s64 = 0.0
                for k in range(d):
                    t = np.float64(A[i, k]) - np.float64(BT[k, j])
                    s64 += t * t
                if s64 <= eps2:
                    if n < cap:
                        out_i[n] = i
                        out_j[n] = j
                        out_d[n] = s64
                    n += 1
    return n


@jit
def _self_nb(A, AT, eps2, band, out_i, out_j, out_d):
    cap = out_i.shape[0]
    d, m = AT.shape
    acc = np.empty(m, np.float32)
    n = 0
    for i in range(m - 1):
        lo = i + 1
        w = m - lo
        # zero-based inner loops over row[lo:] keep them vectorisable
        for j in range(w):
            acc[j] = 0
        for k in range(d):
            a = A[i, k]
            row = AT[k, lo:]
            for j in range(w):
                t = a - row[j]
                acc[j] += t * t
        for j in range(w):
            if acc[j] <= band:
                s64 = 0.0
                for k in range(d):
                    t = np.float64(A[i, k]) - np.float64(AT[k, lo + j])
                    s64 += t * t
                if s64 <= eps2:
                    if n < cap:
                        out_i[n] = i
                        out_j[n] = lo + j
                        out_d[n] = s64
                    n += 1
    return n


def _run_nb(kernel, args, guess):
    cap = max(64, guess)
    while True:
        oi = np.empty(cap, np.int64)
        oj = np.empty(cap, np.int64)
        od = np.empty(cap, np.float64)
        n = kernel(*args, oi, oj, od)
        if n <= cap:
            return oi[:n], oj[:n], od[:n]
        cap = n


def _exact64(A, B, ii, jj):
    diff = A[ii].astype(np.float64) - B[jj].astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def _cross_np(A, B, eps2, band):
    rows = max(1, _CHUNK_CELLS // max(1, B.shape[0] * A.shape[1]))
    out_i, out_j, out_d = [], [], []
    for s in range(0, A.shape[0], rows):
        blk = A[s:s + rows]
        diff = blk[:, None, :] - B[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff, dtype=np.float32)
        ii, jj = np.nonzero(d2 <= band)
        ii = ii + s
        exact = _exact64(A, B, ii, jj)
        keep = exact <= eps2
        out_i.append(ii[keep])
        out_j.append(jj[keep])
        out_d.append(exact[keep])
    if not out_i:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_d)


def _self_np(A, eps2, band):
    ii, jj, dd = _cross_np(A, A, eps2, band)
    keep = ii < jj
    return ii[keep], jj[keep], dd[keep]


def cross_pairs(A: np.ndarray, B: np.ndarray, eps: float):
    """All ``(i, j, dist2)`` with ``||A[i] - B[j]|| <= eps``; DC = len(A)*len(B)."""
    A = np.ascontiguousarray(A, dtype=np.float32)
    B = np.ascontiguousarray(B, dtype=np.float32)
    eps2 = float(eps) ** 2
    band = threshold_band(eps2, A.shape[1])
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64)
    if NUMBA_ENABLED:
        return _run_nb(_cross_nb, (A, np.ascontiguousarray(B.T), eps2, band), A.shape[0] + B.shape[0])
    return _cross_np(A, B, eps2, band)


def self_pairs(A: np.ndarray, eps: float):
    """All ``(i, j, dist2)``, ``i < j``, within one set; DC = n*(n-1)/2."""
    A = np.ascontiguousarray(A, dtype=np.float32)
    eps2 = float(eps) ** 2
    band = threshold_band(eps2, A.shape[1])
    if A.shape[0] < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64)
    if NUMBA_ENABLED:
        return _run_nb(_self_nb, (A, np.ascontiguousarray(A.T), eps2, band), 2 * A.shape[0])
    return _self_np(A, eps2, band)


@jit
def _naive_join_nb(X, eps2, out_i, out_j, out_d):
    cap = out_i.shape[0]
    n = 0
    for i in range(X.shape[0]):
        for j in range(i + 1, X.shape[0]):
            s = _sq64(X[i], X[j])
            if s <= eps2:
                if n < cap:
                    out_i[n] = i
                    out_j[n] = j
                    out_d[n] = s
                n += 1
    return n


def naive_join(X: np.ndarray, eps: float):
    """Plain double loop in float64.  Independent oracle for the blocked join."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    eps2 = float(eps) ** 2
    if X.shape[0] < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64)
    return _run_nb(_naive_join_nb, (X, eps2), 4 * X.shape[0])


def blocked_join(X: np.ndarray, eps: float, block_rows: int = 4096):
    """Row-block join via the ``|a|^2 + |b|^2 - 2ab`` expansion.

    The GEMM screen runs in float64 with a safety margin; survivors are
    re-decided on the direct float64 difference.
    """
    X64 = np.ascontiguousarray(X, dtype=np.float64)
    n = X64.shape[0]
    eps2 = float(eps) ** 2
    norms = np.einsum("ij,ij->i", X64, X64)
    margin = 1e-9 * (2.0 * norms.max(initial=0.0) + eps2) + 1e-12
    out_i, out_j, out_d = [], [], []
    for s in range(0, n, block_rows):
        e = min(n, s + block_rows)
        for t in range(s, n, block_rows):
            u = min(n, t + block_rows)
            g = X64[s:e] @ X64[t:u].T
            d2 = norms[s:e, None] + norms[None, t:u] - 2.0 * g
            ii, jj = np.nonzero(d2 <= eps2 + margin)
            ii = ii + s
            jj = jj + t
            keep = ii < jj
            ii, jj = ii[keep], jj[keep]
            diff = X64[ii] - X64[jj]
            exact = np.einsum("ij,ij->i", diff, diff)
            ok = exact <= eps2
            out_i.append(ii[ok])
            out_j.append(jj[ok])
            out_d.append(exact[ok])
    if not out_i:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_d)
