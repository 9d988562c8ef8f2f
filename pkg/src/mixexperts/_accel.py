"""Optional numba acceleration.

Set ``MOE_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The flag is
read once at import time.
"""

import functools
import os

_disabled = os.environ.get("MOE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

HAS_NUMBA = _nb is not None
USE_NUMBA = HAS_NUMBA and not _disabled

if HAS_NUMBA:
    njit = functools.partial(_nb.njit, cache=True, nogil=True)
else:  # pragma: no cover

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
