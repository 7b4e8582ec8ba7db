"""Numba dispatch.

Set ``STEELSEG_DISABLE_NUMBA=1`` to force the pure numpy kernels, e.g. when
debugging or on platforms without an LLVM toolchain.
"""
from __future__ import annotations

import os

_TRUTHY = {"1", "true", "yes", "on"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("STEELSEG_DISABLE_NUMBA", "").lower() not in _TRUTHY


def njit(*args, **kwargs):
    """``numba.njit`` if numba is importable, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
