import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssjoin import kernels
from ssjoin.kernels import _cross_np, _self_np, cross_pairs, naive_join, self_pairs, threshold_band


def exact_cross(A, B, eps):
    d2 = ((A.astype(np.float64)[:, None] - B.astype(np.float64)[None]) ** 2).sum(-1)
    ii, jj = np.nonzero(d2 <= eps * eps)
    return set(zip(ii.tolist(), jj.tolist()))


@settings(max_examples=60, deadline=None)
@given(na=st.integers(0, 30), nb=st.integers(0, 30), d=st.integers(1, 40), seed=st.integers(0, 10_000),
       eps=st.floats(0.1, 3.0))
def test_cross_matches_float64(na, nb, d, seed, eps):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((na, d)).astype(np.float32)
    B = rng.standard_normal((nb, d)).astype(np.float32)
    want = exact_cross(A, B, eps)
    for fn in (cross_pairs, lambda a, b, e: _cross_np(a, b, e * e, threshold_band(e * e, d))):
        ii, jj, d2 = fn(A, B, eps)
        assert set(zip(ii.tolist(), jj.tolist())) == want
        assert np.all(d2 <= eps * eps)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 40), d=st.integers(1, 20), seed=st.integers(0, 10_000), eps=st.floats(0.1, 3.0))
def test_self_matches_float64(n, d, seed, eps):
    A = np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)
    want = {(i, j) for i, j in exact_cross(A, A, eps) if i < j}
    ii, jj, _ = self_pairs(A, eps)
    assert set(zip(ii.tolist(), jj.tolist())) == want
    if n >= 2:
        ii, jj, _ = _self_np(A, eps * eps, threshold_band(eps * eps, d))
        assert set(zip(ii.tolist(), jj.tolist())) == want
    ii, jj, _ = naive_join(A, eps)
    assert set(zip(ii.tolist(), jj.tolist())) == want


def test_threshold_boundary():
    # distance exactly eps in float64 is kept, one ulp beyond is not
    A = np.array([[0.0, 0.0]], np.float32)
    B = np.array([[0.75, 0.0], [np.nextafter(np.float32(0.75), np.float32(1)), 0.0]], np.float32)
    ii, jj, _ = cross_pairs(A, B, 0.75)
    assert jj.tolist() == [0]


def test_output_buffer_grows():
    A = np.zeros((300, 4), np.float32)
    ii, jj, _ = self_pairs(A, 0.1)
    assert len(ii) == 300 * 299 // 2


@pytest.mark.skipif(not kernels.NUMBA_ENABLED, reason="numba path disabled")
def test_numpy_fallback_in_subprocess(tmp_path):
    script = textwrap.dedent("""
        import numpy as np
        from ssjoin import kernels
        assert not kernels.NUMBA_ENABLED
        rng = np.random.default_rng(0)
        A = rng.standard_normal((120, 24)).astype(np.float32)
        B = rng.standard_normal((90, 24)).astype(np.float32)
        ii, jj, d2 = kernels.cross_pairs(A, B, 6.0)
        si, sj, _ = kernels.self_pairs(A, 6.0)
        np.savez(%r, ii=ii, jj=jj, d2=d2, si=si, sj=sj)
    """ % str(tmp_path / "np.npz"))
    env = dict(os.environ, SSJOIN_DISABLE_NUMBA="1")
    subprocess.run([sys.executable, "-c", script], check=True, env=env)
    got = np.load(tmp_path / "np.npz")
    rng = np.random.default_rng(0)
    A = rng.standard_normal((120, 24)).astype(np.float32)
    B = rng.standard_normal((90, 24)).astype(np.float32)
    ii, jj, d2 = cross_pairs(A, B, 6.0)
    o = np.lexsort((got["jj"], got["ii"]))
    np.testing.assert_array_equal(got["ii"][o], ii)
    np.testing.assert_array_equal(got["jj"][o], jj)
    np.testing.assert_allclose(got["d2"][o], d2, rtol=1e-12)  # summation order differs
    si, sj, _ = self_pairs(A, 6.0)
    o = np.lexsort((got["sj"], got["si"]))
    np.testing.assert_array_equal(got["si"][o], si)
    np.testing.assert_array_equal(got["sj"][o], sj)
