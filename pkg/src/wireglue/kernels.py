"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``WIREGLUE_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("WIREGLUE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

lsap_square = _impl.lsap_square
cluster_labels = _impl.cluster_labels
point_segment_distance = _impl.point_segment_distance
closeness_counts = _impl.closeness_counts

__all__ = ["BACKEND", "lsap_square", "cluster_labels", "point_segment_distance",
           "closeness_counts"]
