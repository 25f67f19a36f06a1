"""Backend switch for the hot kernels.

Set ``SOFO_BACKEND=numpy`` (or ``SOFO_DISABLE_NUMBA=1``) before import to run
the vectorized numpy kernels instead of the numba-compiled loops. Both
backends are always importable so tests and benchmarks can compare them.
"""

import os

_flag = os.environ.get("SOFO_BACKEND", "").strip().lower()
_disabled = os.environ.get("SOFO_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    from numba import njit as _numba_njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _disabled and _flag != "numpy"


def njit(func=None, **kwargs):
    """``numba.njit`` when numba is installed, identity otherwise."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAS_NUMBA:
        if func is not None:
            return func
        return lambda f: f
    if func is not None:
        return _numba_njit(**kwargs)(func)
    return _numba_njit(**kwargs)


def default_backend():
    return "numba" if USE_NUMBA else "numpy"


def resolve_backend(backend):
    if backend is None:
        return default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend
