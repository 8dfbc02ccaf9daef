"""Backend switch for the hot kernels.

Every kernel in this package exists twice: a loop version compiled with
numba, and a vectorised numpy version. ``CLUSTERHOM_BACKEND=numpy`` (or
``CLUSTERHOM_DISABLE_NUMBA=1``) forces the numpy path; otherwise numba is
used when importable.
"""
from __future__ import annotations

import os

_FORCED = os.environ.get("CLUSTERHOM_BACKEND", "").strip().lower()
_DISABLED = os.environ.get("CLUSTERHOM_DISABLE_NUMBA", "0").strip() not in ("", "0", "false")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _numba = None

HAVE_NUMBA = _numba is not None
_backend = "numba" if (HAVE_NUMBA and not _DISABLED and _FORCED != "numpy") else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    The compiled version is always built lazily so that the numpy backend
    never pays the compilation cost.
    """
    kwargs.setdefault("cache", True)
    if _numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _numba.njit(*args, **kwargs)


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Switch backend at runtime (used by the benchmark and the parity tests)."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


def use_numba() -> bool:
    return _backend == "numba"
