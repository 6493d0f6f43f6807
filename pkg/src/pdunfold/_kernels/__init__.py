"""Kernel backend selection.

Two interchangeable implementations of the per-layer forward/backward
kernels exist: a vectorized numpy module and a compiled Cython/BLAS
extension.  The active one is chosen at import time from the environment
variable ``PDUNFOLD_BACKEND`` (``auto``, ``numpy``, or ``compiled``;
``auto`` prefers the compiled kernels when the extension built) and can be
switched at runtime with :func:`set_backend`.
"""

import os

from . import numpy_backend

try:
    from . import _fused as _compiled
except ImportError:
    _compiled = None

__all__ = ["available_backends", "backend", "get_backend_name", "set_backend"]

_active = None


def available_backends():
    names = ["numpy"]
    if _compiled is not None:
        names.append("compiled")
    return names


def _resolve(choice):
    if choice == "auto":
        return _compiled if _compiled is not None else numpy_backend
    if choice == "numpy":
        return numpy_backend
    if choice == "compiled":
        if _compiled is None:
            raise ValueError("compiled kernels requested but the extension is not built")
        return _compiled
    raise ValueError("unknown backend %r (want auto/numpy/compiled)" % choice)


def set_backend(choice):
    """Select the kernel implementation; returns the active backend name."""
    global _active
    _active = _resolve(choice)
    return _active.name


def get_backend_name():
    return _active.name


def backend():
    return _active


set_backend(os.environ.get("PDUNFOLD_BACKEND", "auto"))
