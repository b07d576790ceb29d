"""Numba switch.

Hot loops are written twice: once as explicit loops compiled with ``numba.njit``
and once as vectorised numpy. Setting ``FLEXSIM_DISABLE_JIT=1`` (or running
without numba installed) selects the numpy path everywhere.
"""

import os

_FALSEY = {"", "0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_AVAILABLE = numba is not None
JIT_ENABLED = JIT_AVAILABLE and os.environ.get("FLEXSIM_DISABLE_JIT", "").strip().lower() in _FALSEY


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def use_jit():
    return JIT_ENABLED


def set_jit(enabled):
    """Switch paths at runtime (benchmarks, cross-checking tests). Returns the previous setting."""
    global JIT_ENABLED
    previous = JIT_ENABLED
    JIT_ENABLED = bool(enabled) and JIT_AVAILABLE
    return previous
