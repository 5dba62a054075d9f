"""Hot kernels with a compiled backend and a pure-NumPy fallback.

The compiled module is used when it was built and ``COORDFIT_PURE_PYTHON``
is unset; ``BACKEND`` records which one was selected.
"""
import os

from . import _pykernels

if os.environ.get("COORDFIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

trilinear = _impl.trilinear
bspline_eval = _impl.bspline_eval
partial_shuffle = _impl.partial_shuffle
cubic_weights = _pykernels._cubic_weights
