"""Kernel backend selection.

The env var ``STYLEBOOST_BACKEND`` picks the convolution lane at import time:

* ``auto`` (default): numba if it imports, else pure numpy
* ``numba``: require the JIT lane, fail loudly if unavailable
* ``numpy``: force the pure-numpy lane

Both lanes implement the same contracts; floating-point results may differ
in the low bits between lanes (different summation orders), but each lane is
deterministic on a given machine. ``benchmarks/bench_kernels.py`` compares
their speed.
"""

import os

from ..errors import ConfigError

BACKEND_ENV = "STYLEBOOST_BACKEND"


def _select():
    choice = os.environ.get(BACKEND_ENV, "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ConfigError(
            f"{BACKEND_ENV} must be one of auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        from . import kernels_numpy
        return "numpy", kernels_numpy
    try:
        from . import kernels_numba
        return "numba", kernels_numba
    except ImportError:
        if choice == "numba":
            raise ConfigError(
                f"{BACKEND_ENV}=numba requested but numba is not importable")
        from . import kernels_numpy
        return "numpy", kernels_numpy


ACTIVE_BACKEND, _impl = _select()

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weights = _impl.conv2d_backward_weights
