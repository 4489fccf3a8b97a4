"""Pure-numpy versions of the fused projection/scaling kernels."""

import numpy as np

BACKEND = "python"


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    _check(a, b)
    return float(np.dot(a, b))


def sq_norm(a) -> float:
    return float(np.dot(a, a))


def project_out(g_r, g_l):
    _check(g_r, g_l)
    den = np.dot(g_l, g_l)
    if den == 0.0:
        return np.array(g_r, dtype=np.float64)
    return g_r - (np.dot(g_r, g_l) / den) * g_l


def rescale_to(v, ref):
    _check(v, ref)
    nv = np.dot(v, v)
    nr = np.dot(ref, ref)
    if nv > 0.0 and nr > 0.0:
        return v * (np.sqrt(nr) / np.sqrt(nv))
    return np.zeros(v.shape[0])


def clip_to_norm(g, bound: float):
    nrm = np.sqrt(np.dot(g, g))
    return g * (bound / nrm) if nrm > bound else np.array(g, dtype=np.float64)
