"""Optional numba acceleration.

Set ``VOXEQUIV_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba
is not installed the numpy path is used automatically.
"""

import functools
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _flag("VOXEQUIV_DISABLE_NUMBA")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


def dispatch(numba_impl, numpy_impl):
    """Pick the kernel implementation according to ``USE_NUMBA`` at call time."""

    @functools.wraps(numpy_impl)
    def wrapper(*args, **kwargs):
        if USE_NUMBA:
            return numba_impl(*args, **kwargs)
        return numpy_impl(*args, **kwargs)

    wrapper.numba_impl = numba_impl
    wrapper.numpy_impl = numpy_impl
    return wrapper
