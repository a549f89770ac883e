"""Kernel dispatch: the compiled extension when it was built, numpy otherwise.

Set ``HKDSEARCH_PURE_PYTHON=1`` to force the numpy kernels.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("HKDSEARCH_PURE_PYTHON", "") not in ("1", "true"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

iou_matrix = _impl.iou_matrix
greedy_match = _impl.greedy_match
average_precision = _impl.average_precision
interpolated_ap = _impl.interpolated_ap

__all__ = ["BACKEND", "iou_matrix", "greedy_match", "average_precision", "interpolated_ap"]
