"""numba shim.

Every hot kernel in the package exists twice: a numba ``@njit`` loop and a
vectorized numpy version. ``USE_NUMBA`` picks the default at import time
(``FASTNN_NUMBA=0`` forces numpy); both variants stay importable so they
can be compared against each other.
"""

import logging
import os

from . import config

log = logging.getLogger(__name__)

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and config.numba_requested()

if HAVE_NUMBA:
    prange = numba.prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the system TBB is too old for numba and only produces a warning
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    _n = config.threads()
    if _n is not None:
        numba.set_num_threads(min(_n, numba.config.NUMBA_NUM_THREADS))
else:  # pragma: no cover
    prange = range

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

log.debug("numba available=%s, in use=%s", HAVE_NUMBA, USE_NUMBA)


def pick(numba_impl, numpy_impl):
    """Return the implementation selected by the environment flag."""
    return numba_impl if USE_NUMBA else numpy_impl
