"""Prefix-conditioned flow-matching action chunking with a tick-accurate async runtime."""

from ._accel import NUMBA_AVAILABLE, USE_NUMBA

__version__ = "0.1.0"

__all__ = ["NUMBA_AVAILABLE", "USE_NUMBA", "__version__"]
