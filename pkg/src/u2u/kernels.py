"""Kernel dispatch: compiled Cython routines when available, numpy otherwise.

``BACKEND`` is ``"compiled"`` or ``"python"``. Set ``U2U_NO_EXT=1`` before
import to force the fallback. Both backends expose the same functions and
agree up to floating-point rounding; each is deterministic on its own.
"""

import os

import numpy as np

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("U2U_NO_EXT", "") not in ("1", "true", "yes"):
    try:
        from . import _ext as compiled_backend
    except ImportError:
        compiled_backend = None

BACKEND = "compiled" if compiled_backend is not None else "python"
_impl = compiled_backend if compiled_backend is not None else python_backend


def nearest_centroid(x, c):
    """Index and squared distance of the nearest row of ``c`` for each row of ``x``.

    Ties go to the lowest centroid index.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2:
        raise ValueError("expected 2-D arrays")
    return _impl.nearest_centroid(x, c)


def edit_distance(a, b):
    """Levenshtein distance between two integer sequences, unit costs."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    return int(_impl.edit_distance(a, b))


def masked_softmax(scores, allowed):
    return _impl.masked_softmax(scores, allowed)


def softmax_backward(probs, dprobs):
    return _impl.softmax_backward(probs, dprobs)


def crc64(data, crc=0):
    if isinstance(data, np.ndarray):
        data = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        data = np.frombuffer(bytes(data), dtype=np.uint8)
    return int(_impl.crc64(data, crc))
