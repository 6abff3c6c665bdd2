"""Numba switch.

Set ``DIFFBCI_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels.  Results from the two paths agree to rounding, and each path is
bit-reproducible on its own.
"""
import os

_DISABLED = os.environ.get("DIFFBCI_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in a subprocess
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
