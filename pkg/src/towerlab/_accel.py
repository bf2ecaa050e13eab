"""Backend selection for the compiled kernels.

Set ``TOWERLAB_NUMBA=0`` to force the pure-numpy implementations. The flag is
read once at import time.
"""

import os

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_FLAG = os.environ.get("TOWERLAB_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba in nopython, GIL-free mode.

    Falls back to returning ``func`` unchanged when numba is missing, so the
    ``_numba`` twins stay importable (and slow) everywhere.
    """
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
