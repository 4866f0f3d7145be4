"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``PDM2_KERNELS=python`` to force the numpy path.
"""
import os

from . import _pykernels

if os.environ.get("PDM2_KERNELS", "").lower() == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

# numpy's correlate beats the compiled loop (see benchmarks/bench_kernels.py),
# so both backends use it; _ckernels.xcorr stays as a cross-check
xcorr = _pykernels.xcorr
window_features = _impl.window_features
bag_distances = _impl.bag_distances
