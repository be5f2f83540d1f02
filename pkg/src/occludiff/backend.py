"""Kernel backend selection.

The hot numeric kernels (convolutions, fused diffusion-step arithmetic) exist
twice: a numba @njit implementation and a pure-numpy one.  The environment
variable ``OCCLUDIFF_BACKEND`` picks between them:

    OCCLUDIFF_BACKEND=numba   force numba (error if numba is unavailable)
    OCCLUDIFF_BACKEND=numpy   force the pure-numpy path
    unset                     numba when importable, numpy otherwise

The choice is read once at import time; ``benchmarks/bench_kernels.py``
compares both paths.
"""

import os

_ENV_VAR = "OCCLUDIFF_BACKEND"

try:
    import numba  # noqa: F401

    _HAS_NUMBA = True
except ImportError:
    _HAS_NUMBA = False


def _resolve() -> str:
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        if not _HAS_NUMBA:
            raise RuntimeError(f"{_ENV_VAR}=numba but numba is not importable")
        return "numba"
    if requested:
        raise RuntimeError(f"unknown {_ENV_VAR} value {requested!r}, expected 'numba' or 'numpy'")
    return "numba" if _HAS_NUMBA else "numpy"


_ACTIVE = _resolve()


def active_backend() -> str:
    """Name of the kernel backend chosen at import time."""
    return _ACTIVE
