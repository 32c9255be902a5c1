"""Numba switch.

Set ``ADVSEP_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable. The flag is read once at import time.
"""

import os

_DISABLE = os.environ.get("ADVSEP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLE

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}


def njit(func):
    """Compile ``func`` with the package defaults, or return it untouched."""
    if not HAS_NUMBA:
        return func
    return numba.njit(**numba_default)(func)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
