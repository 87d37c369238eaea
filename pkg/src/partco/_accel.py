"""Numba dispatch switch.

Set ``PARTCO_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once, at import time.
"""
import os

_FLAG = os.environ.get("PARTCO_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """``numba.njit(cache=True)`` when enabled, otherwise the function unchanged."""
    if not USE_NUMBA:
        return func
    return _numba.njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
