"""Kernel backend selection.

Two interchangeable implementations of the hot training kernels:

* ``_core`` — Cython extension, built at install time (fast path),
* ``pyref`` — pure NumPy with the same fixed reduction order (fallback).

Selection happens once at import. ``CLLORA_BACKEND`` forces it:
``ext`` (fail if the extension is missing), ``python``, or ``auto``
(default: extension if available).
"""

import os

from . import pyref

_KERNEL_NAMES = [
    "matmul",
    "add_scaled",
    "sgd_step",
    "relu",
    "relu_backward",
    "row_softmax",
    "row_softmax_backward",
    "causal_softmax",
    "causal_softmax_backward",
    "layernorm_forward",
    "layernorm_backward",
    "cross_entropy",
]


def _select():
    requested = os.environ.get("CLLORA_BACKEND", "auto").lower()
    if requested not in ("auto", "ext", "python"):
        raise ValueError(
            f"CLLORA_BACKEND must be one of auto/ext/python, got {requested!r}"
        )
    if requested == "python":
        return pyref, "python"
    try:
        from . import _core
        return _core, "ext"
    except ImportError:
        if requested == "ext":
            raise ImportError(
                "CLLORA_BACKEND=ext but the compiled kernel extension is not "
                "available; reinstall with a C compiler or use CLLORA_BACKEND=python"
            ) from None
        return pyref, "python"


_impl, BACKEND = _select()

for _name in _KERNEL_NAMES:
    globals()[_name] = getattr(_impl, _name)


def get_backend():
    """Name of the active kernel backend: 'ext' or 'python'."""
    return BACKEND


__all__ = _KERNEL_NAMES + ["get_backend", "BACKEND", "pyref"]
