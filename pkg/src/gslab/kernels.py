"""Kernel backend selection.

The compiled extension is used when it was built; set ``GSL_KERNELS=python``
to force the numpy fallback. Both backends take and return flat contiguous
float64 arrays.
"""

import os

import numpy as np

from . import _kernels_py

_backend = _kernels_py
if os.environ.get("GSL_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _backend = _kernels_py

BACKEND: str = _backend.BACKEND


def _flat(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1)


def dot(a, b) -> float:
    return float(_backend.dot(_flat(a), _flat(b)))


def sq_norm(a) -> float:
    return float(_backend.sq_norm(_flat(a)))


def project_out(g_r: np.ndarray, g_l: np.ndarray) -> np.ndarray:
    """``g_r - <g_r, g_l>/<g_l, g_l> * g_l`` with the shape of ``g_r``."""
    return np.asarray(_backend.project_out(_flat(g_r), _flat(g_l))).reshape(np.shape(g_r))


def rescale_to(v: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """``v * |ref| / |v|``, or zeros when either norm vanishes."""
    return np.asarray(_backend.rescale_to(_flat(v), _flat(ref))).reshape(np.shape(v))


def clip_to_norm(g: np.ndarray, bound: float) -> np.ndarray:
    return np.asarray(_backend.clip_to_norm(_flat(g), float(bound))).reshape(np.shape(g))
