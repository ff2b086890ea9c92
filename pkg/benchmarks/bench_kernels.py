"""Time the verification kernels: numba loops against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 1000] [--dim 32] [--repeat 5]

Both paths run in one process: the numpy versions are called directly, so
``SSJOIN_DISABLE_NUMBA`` does not need to be set.  Results are checked to
agree before timing.
"""
import argparse
import time

import numpy as np

from ssjoin import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    rng = np.random.default_rng(a.seed)
    A = rng.standard_normal((a.rows, a.dim)).astype(np.float32)
    B = rng.standard_normal((a.rows, a.dim)).astype(np.float32)
    # eps near the 1st percentile of cross distances: a realistic hit rate
    sample = np.linalg.norm(A[:200, None] - B[None, :200], axis=-1)
    eps = float(np.quantile(sample, 0.01))
    eps2 = eps * eps
    band = kernels.threshold_band(eps2, a.dim)

    cases = {
        "cross": (lambda: kernels.cross_pairs(A, B, eps), lambda: kernels._cross_np(A, B, eps2, band)),
        "self": (lambda: kernels.self_pairs(A, eps), lambda: kernels._self_np(A, eps2, band)),
    }
    print(f"rows={a.rows} dim={a.dim} eps={eps:.4f} numba={'on' if kernels.NUMBA_ENABLED else 'off'}")
    print(f"{'kernel':<8}{'numba_s':>10}{'numpy_s':>10}{'speedup':>9}{'pairs':>9}{'Mdist/s':>9}")
    for name, (fast, slow) in cases.items():
        fi, fj, _ = fast()          # warm-up and compile
        si, sj, _ = slow()
        assert set(zip(fi.tolist(), fj.tolist())) == set(zip(si.tolist(), sj.tolist()))
        tf = best_of(fast, a.repeat)
        ts = best_of(slow, a.repeat)
        dc = a.rows * a.rows if name == "cross" else a.rows * (a.rows - 1) // 2
        print(f"{name:<8}{tf:>10.4f}{ts:>10.4f}{ts / tf:>9.2f}{len(fi):>9}{dc / tf / 1e6:>9.1f}")


if __name__ == "__main__":
    main()
