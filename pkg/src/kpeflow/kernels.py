"""Backend selection for the hot loops.

The compiled extension ``kpeflow._ckernels`` is used when it was built and
``KPEFLOW_PURE_PYTHON`` is unset or ``0``; otherwise the numpy versions in
``kpeflow._pykernels`` are used. ``BACKEND`` names the active choice.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

__all__ = [
    "BACKEND",
    "available_backends",
    "get_backend",
    "hungarian",
    "jacobi_eigh",
    "kde_log_density",
    "knn_kth_distance",
]


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def get_backend(name):
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown backend {name!r}")


if _ckernels is not None and os.environ.get("KPEFLOW_PURE_PYTHON", "0") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_impl = get_backend(BACKEND)
jacobi_eigh = _impl.jacobi_eigh
hungarian = _impl.hungarian
knn_kth_distance = _impl.knn_kth_distance
kde_log_density = _impl.kde_log_density
