"""numba switch. Set ``MAAC_DISABLE_NUMBA=1`` to force the pure-numpy kernels."""

import functools
import os

NUMBA_ENABLED = os.environ.get("MAAC_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None
    NUMBA_ENABLED = False

if _nb is not None:
    njit = functools.partial(_nb.njit, cache=True, nogil=True)
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
