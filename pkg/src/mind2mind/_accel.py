"""Numba switch.

``M2M_NUMBA=0`` forces the pure numpy/Python code paths. ``M2M_THREADS``
caps numba's thread pool.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("M2M_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def thread_cap() -> int:
    raw = os.environ.get("M2M_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


if USE_NUMBA and os.environ.get("M2M_THREADS"):
    try:
        numba.set_num_threads(min(thread_cap(), numba.config.NUMBA_NUM_THREADS))
    except Exception:  # pragma: no cover
        pass


def njit(fn):
    """Compile ``fn`` with numba when enabled, else return it unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn
