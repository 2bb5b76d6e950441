"""Numba toggle.

Set ``LAMBDAFLOW_NUMBA=0`` before import to force the pure-numpy kernels.
"""

import os

NJIT_OPTIONS = dict(cache=True, nogil=True, fastmath=False, error_model="numpy")


def _env_enabled() -> bool:
    return os.environ.get("LAMBDAFLOW_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _env_enabled()


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged.

    The returned callable is always usable; the numpy dispatch decision is made
    separately by :data:`USE_NUMBA` so both paths stay importable for benchmarks.
    """
    if not NUMBA_AVAILABLE:
        return fn
    return _numba.njit(**NJIT_OPTIONS)(fn)
