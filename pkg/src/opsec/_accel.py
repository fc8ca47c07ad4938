"""Optional numba acceleration for the numeric kernels.

Set ``OPSEC_NO_NUMBA=1`` to force the pure-numpy code paths (also used
automatically when numba cannot be imported). Both paths must produce the
same numbers; ``tests/test_kernels.py`` checks them against each other.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("OPSEC_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by OPSEC_NO_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in CI
    _njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
