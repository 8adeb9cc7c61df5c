"""Numeric kernel backend selection.

Two lanes implement the same kernel contracts: a compiled Cython extension
(_fastcore) and pure numpy (reference). The compiled lane is used when the
extension imports; EQB_KERNELS={auto,python,compiled} overrides. The public
functions here normalize shapes/dtypes and then dispatch.
"""

import os

import numpy as np

from . import reference

_choice = os.environ.get("EQB_KERNELS", "auto").lower()
_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _fastcore as _impl
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "EQB_KERNELS=compiled but the _fastcore extension is not built"
            )
        _impl = None
if _impl is None:
    _impl = reference

BACKEND = "compiled" if _impl is not reference else "python"

SH2_K_XY = reference.SH2_K_XY
SH2_K_Z2 = reference.SH2_K_Z2
SH2_K_X2Y2 = reference.SH2_K_X2Y2


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def pairwise_distances(x):
    return _impl.pairwise_distances(_c(x))


def pairwise_distances_backward(x, grad):
    x = _c(x)
    return _impl.pairwise_distances_backward(x, _c(grad, dtype=x.dtype))


def sh2(r):
    return _impl.sh2(_c(r))


def sh2_backward(r, grad):
    r = _c(r)
    return _impl.sh2_backward(r, _c(grad, dtype=r.dtype))


def segment_sum(values, segments, num_segments):
    values = _c(values)
    segments = _c(segments, dtype=np.int64)
    lead = values.shape[0]
    flat = values.reshape(lead, -1)
    out = _impl.segment_sum(flat, segments, num_segments)
    return out.reshape((num_segments,) + values.shape[1:])


def segment_max(values, segments, num_segments):
    return _impl.segment_max(_c(values), _c(segments, dtype=np.int64), num_segments)
