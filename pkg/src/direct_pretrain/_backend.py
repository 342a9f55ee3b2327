"""Kernel backend selection.

Hot loops (image/mask resampling, IoU matrices, greedy matching) are written
twice: a numba ``@njit`` version and a vectorised numpy version. The numba path
is used when numba imports and ``DIRECT_PRETRAIN_NUMBA`` is not set to ``0``.
"""
import os

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    nb = None

_flag = os.environ.get("DIRECT_PRETRAIN_NUMBA", "1").strip().lower()
USE_NUMBA = nb is not None and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if nb is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return nb.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
