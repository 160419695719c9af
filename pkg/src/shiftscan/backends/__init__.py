"""Convolution kernel backend selection.

The compiled Cython kernels are used when they imported cleanly; otherwise
everything runs on the numpy fallback.  SHIFTSCAN_BACKEND=numpy or =cython
overrides the automatic choice.  float64 arrays always take the numpy path
(the compiled kernels are float32-only); gradient checks rely on this.
"""
import os

import numpy as np

from . import numpy_backend

_ck = None
_requested = os.environ.get("SHIFTSCAN_BACKEND", "auto").lower()
if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"SHIFTSCAN_BACKEND must be auto/cython/numpy, "
                     f"got {_requested!r}")
if _requested in ("auto", "cython"):
    try:
        from . import _ckernels as _ck
    except ImportError:
        if _requested == "cython":
            raise
        _ck = None

BACKEND = "cython" if _ck is not None else "numpy"


def conv3x3_fw(xp, w, b, stride):
    if _ck is not None and xp.dtype == np.float32:
        return _ck.conv3x3_fw(xp, w, b, stride)
    return numpy_backend.conv3x3_fw(xp, w, b, stride)


def conv3x3_dw(xp, gy, stride):
    if _ck is not None and xp.dtype == np.float32:
        return _ck.conv3x3_dw(xp, gy, stride)
    return numpy_backend.conv3x3_dw(xp, gy, stride)
