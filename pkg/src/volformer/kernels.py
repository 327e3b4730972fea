"""Backend selection for the convolution hot loops.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. ``VOLFORMER_BACKEND=python`` forces the fallback,
``VOLFORMER_BACKEND=cython`` makes a missing extension an import error.
"""

import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels_cy
except ImportError:  # extension not built
    _kernels_cy = None

_requested = os.environ.get("VOLFORMER_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "cython"):
    raise ImportError(f"VOLFORMER_BACKEND must be auto, python or cython, got {_requested!r}")
if _requested == "cython" and _kernels_cy is None:
    raise ImportError("VOLFORMER_BACKEND=cython but the compiled extension is not built")

_impl = _kernels_cy if (_kernels_cy is not None and _requested != "python") else _kernels_py
BACKEND = "cython" if _impl is _kernels_cy else "python"


def available_backends():
    return ["python"] + (["cython"] if _kernels_cy is not None else [])


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython" and _kernels_cy is not None:
        return _kernels_cy
    raise ValueError(f"kernel backend {name!r} is not available")


def conv3d_forward(xp, w, stride):
    return _impl.conv3d_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w), tuple(stride))


def conv3d_backward_input(gout, w, stride, xp_shape):
    return _impl.conv3d_backward_input(
        np.ascontiguousarray(gout), np.ascontiguousarray(w), tuple(stride), tuple(xp_shape)
    )


def conv3d_backward_weight(xp, gout, kernel, stride):
    return _impl.conv3d_backward_weight(
        np.ascontiguousarray(xp), np.ascontiguousarray(gout), tuple(kernel), tuple(stride)
    )
