"""Switch between numba-compiled kernels and the pure-numpy fallback.

Set ``DASHENG_NUMBA=0`` to force the numpy path. The choice is made once, at
import time, so every kernel in a process runs through the same path.
"""

import os

try:
    import numba

    _HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("DASHENG_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``, or the identity decorator when numba is absent."""
    if not _HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def prange(*args):
    if _HAVE_NUMBA:
        return numba.prange(*args)
    return range(*args)


def set_num_threads(n: int) -> None:
    """Cap intra-op parallelism of the compiled kernels."""
    if _HAVE_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
