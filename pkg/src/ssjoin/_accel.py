"""Numba shim.

Kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``SSJOIN_DISABLE_NUMBA=1`` is set (or numba is
missing), in which case the vectorised numpy fallbacks in
:mod:`ssjoin.kernels` are used and loop-only kernels run interpreted.
"""
import os
import warnings

_disabled = os.environ.get("SSJOIN_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    if not _disabled:
        warnings.warn("numba is not installed - falling back to numpy kernels")

NUMBA_ENABLED = _numba is not None and not _disabled


def jit(fn=None, **kw):
    """``numba.njit(cache=True, nogil=True)`` or a passthrough.

    The undecorated function is always reachable as ``fn.py_func`` so the
    benchmark can time both paths in one process.
    """
    def wrap(f):
        if not NUMBA_ENABLED:
            f.py_func = f
            return f
        opts = {"cache": True, "nogil": True}
        opts.update(kw)
        return _numba.njit(**opts)(f)

    if fn is None:
        return wrap
    return wrap(fn)
