"""Numba switch.

Hot kernels are written twice: a ``@njit`` loop version and a vectorised
numpy version.  Set ``SHHLAB_DISABLE_NUMBA=1`` to force the numpy path; it is
also used automatically when numba is not importable.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

_FALSY = {"1", "true", "yes", "on"}


def numba_enabled():
    flag = os.environ.get("SHHLAB_DISABLE_NUMBA", "").strip().lower()
    return HAVE_NUMBA and flag not in _FALSY


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


prange = numba.prange if HAVE_NUMBA else range
