# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled cell-Galerkin kernels.

Cells are uniform: x-cell ``a`` is ``[x0 + a w, x0 + (a+1) w)`` and
likewise for y.  Entry ``(a, b)`` is the integral of the kernel factor
over x-cell ``a`` times y-cell ``b``.  Signatures mirror ``_pycore``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, floor, log1p, pow

cnp.import_array()


cdef inline double _hilbert_unit(long d) nogil:
    # int_0^1 int_0^1 ds dt / (s - t + d); odd in d, zero at d = 0
    cdef double t
    if d == 0:
        return 0.0
    if d < 0:
        return -_hilbert_unit(-d)
    if d == 1:
        return 2.0 * 0.6931471805599453
    t = <double> d
    return t * log1p(-1.0 / (t * t)) + log1p(2.0 / (t - 1.0))


def hilbert_cells(double x0, double y0, double w, long nx, long ny, long row0=0, long row1=-1):
    """Closed-form cell matrix of 1/(x - y) (principal value on the diagonal)."""
    cdef double shift = (x0 - y0) / w
    cdef long s = <long> floor(shift + 0.5)
    if fabs(shift - s) > 1e-12:
        raise ValueError("x and y cell grids must be aligned")
    if row1 < 0:
        row1 = nx
    cdef long lo = s + row0 - (ny - 1), hi = s + row1 - 1
    cdef cnp.ndarray[double, ndim=1] tab = np.empty(hi - lo + 1)
    cdef long d, a, b
    for d in range(lo, hi + 1):
        tab[d - lo] = w * _hilbert_unit(d)
    out = np.empty((row1 - row0, ny))
    cdef double[:, ::1] o = out
    cdef double[::1] t = tab
    with nogil:
        for a in range(row0, row1):
            for b in range(ny):
                o[a - row0, b] = t[s + a - b - lo]
    return out


cdef inline double _compact(double u, double v, double p, double q, double inv4s2, bint plain) nogil:
    cdef double au, g
    if u == 0.0:
        return 0.0
    if plain:
        g = u / (1.0 + (u * u) * (u * u))
    else:
        au = fabs(u)
        g = pow(au, p - 1.0) / (1.0 + pow(au, q))
        if u < 0:
            g = -g
    return g * exp(-v * v * inv4s2)


def compact_cells(double x0, double y0, double w, long nx, long ny,
                  double p, double q, double sigma, double[::1] nodes, double[::1] weights,
                  double cutoff, long row0=0, long row1=-1):
    """Tensor Gauss-Legendre cell matrix of the compact model factor.

    Cell pairs whose x + y range stays beyond ``cutoff`` are left at zero
    (the Gaussian there is below double precision relative to the peak).
    """
    if row1 < 0:
        row1 = nx
    out = np.zeros((row1 - row0, ny))
    cdef double[:, ::1] o = out
    cdef int P = nodes.shape[0]
    cdef double inv4s2 = 1.0 / (4.0 * sigma * sigma)
    cdef bint plain = (p == 2.0 and q == 4.0)
    cdef double h = 0.5 * w, xa, yb, xs, ys, acc, inner, vmin
    cdef long a, b
    cdef int i, j
    with nogil:
        for a in range(row0, row1):
            xa = x0 + a * w
            for b in range(ny):
                yb = y0 + b * w
                vmin = fabs(xa + yb + w)
                if vmin > w:
                    vmin -= w
                else:
                    vmin = 0.0
                if vmin > cutoff:
                    continue
                acc = 0.0
                for i in range(P):
                    xs = xa + h * (nodes[i] + 1.0)
                    inner = 0.0
                    for j in range(P):
                        ys = yb + h * (nodes[j] + 1.0)
                        inner += weights[j] * _compact(xs - ys, xs + ys, p, q, inv4s2, plain)
                    acc += weights[i] * inner
                o[a - row0, b] = acc * h * h
    return out


def compact_eval(double[::1] u, double[::1] v, double p, double q, double sigma):
    """Vectorised compact factor on difference/sum coordinates."""
    cdef long n = u.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double inv4s2 = 1.0 / (4.0 * sigma * sigma)
    cdef bint plain = (p == 2.0 and q == 4.0)
    with nogil:
        for i in range(n):
            o[i] = _compact(u[i], v[i], p, q, inv4s2, plain)
    return out
