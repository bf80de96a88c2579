"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

The active backend is chosen once at import time. Set FEWDET_PURE_PYTHON=1 to
force the fallback even when the extension is built. ``use_backend`` swaps the
backend inside a ``with`` block so tests and benchmarks can compare the two.
"""

import os
from contextlib import contextmanager

from . import _fallback

_IMPLS = {"fallback": _fallback}

if not os.environ.get("FEWDET_PURE_PYTHON"):
    try:
        from . import _core  # compiled at install time; optional

        _IMPLS["compiled"] = _core
    except ImportError:
        pass

_active = _IMPLS.get("compiled", _fallback)


def backend_name():
    """Name of the backend currently serving kernel calls."""
    return _active.NAME


def available_backends():
    """Sorted names of the backends importable in this process."""
    return sorted(_IMPLS)


@contextmanager
def use_backend(name):
    """Temporarily route kernel calls to the named backend."""
    global _active
    if name not in _IMPLS:
        raise KeyError(f"backend {name!r} not available; have {available_backends()}")
    prev = _active
    _active = _IMPLS[name]
    try:
        yield
    finally:
        _active = prev


def matmul(a, b):
    return _active.matmul(a, b)


def matmul_nt(a, b):
    return _active.matmul_nt(a, b)


def matmul_tn(a, b):
    return _active.matmul_tn(a, b)


def softmax_rows(x):
    return _active.softmax_rows(x)


def softmax_rows_backward(y, gy):
    return _active.softmax_rows_backward(y, gy)


def layer_norm_forward(x, gamma, beta, eps):
    return _active.layer_norm_forward(x, gamma, beta, eps)


def layer_norm_backward(xhat, inv_std, gamma, gy):
    return _active.layer_norm_backward(xhat, inv_std, gamma, gy)
