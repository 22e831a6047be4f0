"""JIT switch for the pixel kernels.

Set ``PATCHTOKENS_NO_JIT=1`` to force the pure-numpy paths (useful when
numba is missing or when debugging a kernel).
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_JIT = HAS_NUMBA and os.environ.get("PATCHTOKENS_NO_JIT", "0") not in ("1", "true", "yes")


def njit(fn):
    """``numba.njit(cache=True)`` when available, otherwise the function itself."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
