"""numba switch.

Set ``DCID_DISABLE_NUMBA=1`` to force the pure-numpy path of every kernel in
:mod:`dcid.kernels`. The flag is read once, at import time.
"""
import os

_disabled = os.environ.get("DCID_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("disabled by DCID_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        # bare @njit and @njit(...) both degrade to the undecorated function
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def deco(fn):
            return fn

        return deco


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
