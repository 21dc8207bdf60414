"""Kernel backend selection.

The hot row-wise kernels exist twice: a numba ``@njit`` build (the default)
and a pure-numpy fallback. Set ``GEOGROUND_BACKEND=numpy`` to force the
fallback, or ``GEOGROUND_BACKEND=numba`` to require the compiled path. Matrix
products are BLAS-bound numpy in both paths, so the flag only swaps the fused
per-row kernels.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import os
import warnings

from ..errors import ConfigError
from . import numpy_kernels

_CHOICES = ("numba", "numpy")
_requested = os.environ.get("GEOGROUND_BACKEND", "").strip().lower()

if _requested and _requested not in _CHOICES:
    raise ConfigError(
        f"GEOGROUND_BACKEND must be one of {_CHOICES}, got {_requested!r}"
    )

if _requested == "numpy":
    kernels = numpy_kernels
    backend_name = "numpy"
else:
    try:
        from . import numba_kernels

        kernels = numba_kernels
        backend_name = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        warnings.warn("numba unavailable; using the pure-numpy kernel path")
        kernels = numpy_kernels
        backend_name = "numpy"
