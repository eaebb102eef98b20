"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise (or when
``AVUR_PURE_PYTHON=1``) the numpy fallback is used. Both return identical
results.
"""

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("AVUR_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend forced")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def backends() -> dict:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def edit_distance(ref, hyp, impl=None) -> int:
    impl = impl or _impl
    if impl is _kernels_py:
        return impl.edit_distance(list(ref), list(hyp))
    return impl.edit_distance(np.ascontiguousarray(ref, dtype=np.int_), np.ascontiguousarray(hyp, dtype=np.int_))


def nearest_centroid(x, centroids, impl=None):
    """Labels (lowest index on ties) and squared distances."""
    impl = impl or _impl
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape} vs {c.shape}")
    return impl.nearest_centroid(x, c)


def run_starts(labels, impl=None) -> np.ndarray:
    impl = impl or _impl
    return impl.run_starts(np.ascontiguousarray(labels, dtype=np.int64))
