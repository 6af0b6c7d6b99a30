"""Inner-loop kernels: compiled Cython core with a pure-Python fallback.

The compiled module is used when it was built and importable; setting
``AMP_SIM_PURE_PYTHON=1`` forces the fallback. ``BACKEND`` names the active
implementation.
"""

import os

from . import _fallback

if os.environ.get("AMP_SIM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "cython" if _impl is not _fallback else "python"

rolling_weighted_mean = _impl.rolling_weighted_mean
merit_order_dispatch = _impl.merit_order_dispatch
enumerate_min_cover = _impl.enumerate_min_cover
branch_and_bound_cover = _impl.branch_and_bound_cover

__all__ = [
    "BACKEND",
    "rolling_weighted_mean",
    "merit_order_dispatch",
    "enumerate_min_cover",
    "branch_and_bound_cover",
]
