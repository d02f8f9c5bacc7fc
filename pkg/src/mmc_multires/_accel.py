"""Backend switch for the hot kernels.

Numba is used when importable unless ``MMC_NO_NUMBA`` is set to a truthy
value, in which case every kernel falls back to its pure-numpy twin.
"""

import os

_FLAG = os.environ.get("MMC_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
