"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy twins in ``_pykernels`` are used. ``RETSEG_KERNELS=python`` forces the
fallback and ``RETSEG_KERNELS=c`` makes a missing extension an import error.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

_NAMES = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "upsample2x_forward",
    "upsample2x_backward",
    "decay_mask",
)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "python"
_active: ModuleType = _pykernels


def available() -> list[str]:
    return ["python"] + (["c"] if _ckernels is not None else [])


def use(name: str) -> None:
    """Switch the active backend (``"c"``, ``"python"`` or ``"auto"``) process-wide."""
    global BACKEND, _active
    if name == "auto":
        name = "c" if _ckernels is not None else "python"
    if name == "c":
        if _ckernels is None:
            raise ImportError("compiled kernels not built; run `pip install -e . --no-build-isolation`")
        _active = _ckernels
    elif name == "python":
        _active = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def conv2d_forward(x, w, stride, padding, groups):
    return _active.conv2d_forward(x, w, stride, padding, groups)


def conv2d_backward_input(gy, w, x_shape, stride, padding, groups):
    return _active.conv2d_backward_input(gy, w, tuple(x_shape), stride, padding, groups)


def conv2d_backward_weight(x, gy, w_shape, stride, padding, groups):
    return _active.conv2d_backward_weight(x, gy, tuple(w_shape), stride, padding, groups)


def upsample2x_forward(x):
    return _active.upsample2x_forward(x)


def upsample2x_backward(gy):
    return _active.upsample2x_backward(gy)


def decay_mask(coords, gamma):
    return _active.decay_mask(coords, gamma)


_choice = os.environ.get("RETSEG_KERNELS", "auto").lower()
if _choice == "auto":
    use("c" if _ckernels is not None else "python")
else:
    use(_choice)
