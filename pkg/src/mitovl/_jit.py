"""Numba switch.

Hot kernels are written as plain loops and compiled with ``njit`` unless
``MITOVL_DISABLE_JIT`` is set to a truthy value (or numba is missing), in
which case the vectorised numpy twins in :mod:`mitovl.kernels` are used.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the env
    numba = None
    HAS_NUMBA = False

JIT_DISABLED = os.environ.get("MITOVL_DISABLE_JIT", "").strip().lower() not in _FALSY
USE_JIT = HAS_NUMBA and not JIT_DISABLED

NJIT_OPTS = dict(cache=True, nogil=True, fastmath=False, error_model="numpy")


def njit(fn):
    """Compile ``fn`` with numba when available; the raw function stays on ``.py_func``."""
    if not HAS_NUMBA:
        fn.py_func = fn
        return fn
    return numba.njit(**NJIT_OPTS)(fn)
