# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused single-pass kernels for layer-wise gradient projection and scaling."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "cython"


cdef double _dot(const double[::1] a, const double[::1] b) noexcept nogil:
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double s = 0.0
    for i in range(n):
        s += a[i] * b[i]
    return s


def dot(const double[::1] a, const double[::1] b):
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return _dot(a, b)


def sq_norm(const double[::1] a):
    return _dot(a, a)


def project_out(const double[::1] g_r, const double[::1] g_l):
    """Return g_r minus its component along g_l; g_r itself when g_l is zero."""
    cdef Py_ssize_t i, n = g_r.shape[0]
    if g_l.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {g_l.shape[0]}")
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double num = 0.0, den = 0.0, c
    with nogil:
        for i in range(n):
            num += g_r[i] * g_l[i]
            den += g_l[i] * g_l[i]
        if den == 0.0:
            for i in range(n):
                o[i] = g_r[i]
        else:
            c = num / den
            for i in range(n):
                o[i] = g_r[i] - c * g_l[i]
    return out


def rescale_to(const double[::1] v, const double[::1] ref):
    """Scale v to the Euclidean norm of ref; zero output if either norm is zero."""
    cdef Py_ssize_t i, n = v.shape[0]
    if ref.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {ref.shape[0]}")
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double nv = 0.0, nr = 0.0, s
    with nogil:
        for i in range(n):
            nv += v[i] * v[i]
            nr += ref[i] * ref[i]
        if nv > 0.0 and nr > 0.0:
            s = sqrt(nr) / sqrt(nv)
            for i in range(n):
                o[i] = v[i] * s
    return out


def clip_to_norm(const double[::1] g, double bound):
    cdef Py_ssize_t i, n = g.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double nrm = sqrt(_dot(g, g)), s = 1.0
    if nrm > bound:
        s = bound / nrm
    with nogil:
        for i in range(n):
            o[i] = g[i] * s
    return out
