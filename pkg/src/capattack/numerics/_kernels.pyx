# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels.

Same functions and semantics as capattack.numerics._kernels_py; the
matrices here are small enough that fused C loops beat BLAS-backed numpy
calls on per-call overhead.
"""

import numpy as np

from libc.math cimport exp, log, tanh as ctanh

from ..errors import DimensionError

BACKEND_NAME = "compiled"


cdef inline double _sig(double a) noexcept nogil:
    cdef double e
    if a >= 0.0:
        return 1.0 / (1.0 + exp(-a))
    e = exp(a)
    return e / (1.0 + e)


def dense_fwd(object w, object x, object b):
    """y = w @ x + b for w (m,n), x (n,), b (m,)."""
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise DimensionError("dense expects w (m,n), x (n,), b (m,)")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise DimensionError(
            "dense shape mismatch: w %r, x %r, b %r" % (w.shape, x.shape, b.shape)
        )
    cdef double[:, ::1] wv = w
    cdef double[::1] xv = x
    cdef double[::1] bv = b
    cdef Py_ssize_t m = wv.shape[0], n = wv.shape[1], i, j
    out_arr = np.empty(m)
    cdef double[::1] out = out_arr
    cdef double acc
    for i in range(m):
        acc = bv[i]
        for j in range(n):
            acc += wv[i, j] * xv[j]
        out[i] = acc
    return out_arr


def dense_bwd(object w, object x, object gy, bint need_w, bint need_x):
    """Adjoints of dense: gw = outer(gy, x), gx = w.T @ gy; gb equals gy."""
    cdef double[:, ::1] wv = w
    cdef double[::1] xv = x
    cdef double[::1] gv = gy
    cdef Py_ssize_t m = wv.shape[0], n = wv.shape[1], i, j
    cdef double acc, gi
    gw_arr = None
    gx_arr = None
    cdef double[:, ::1] gw
    cdef double[::1] gx
    if need_w:
        gw_arr = np.empty((m, n))
        gw = gw_arr
        for i in range(m):
            gi = gv[i]
            for j in range(n):
                gw[i, j] = gi * xv[j]
    if need_x:
        gx_arr = np.empty(n)
        gx = gx_arr
        for j in range(n):
            acc = 0.0
            for i in range(m):
                acc += wv[i, j] * gv[i]
            gx[j] = acc
    return gw_arr, gx_arr


def tanh_fwd(object x):
    cdef double[::1] xv = x
    cdef Py_ssize_t n = xv.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = ctanh(xv[i])
    return out_arr


def tanh_bwd(object y, object gy):
    cdef double[::1] yv = y
    cdef double[::1] gv = gy
    cdef Py_ssize_t n = yv.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = gv[i] * (1.0 - yv[i] * yv[i])
    return out_arr


def log_softmax_fwd(object z):
    """Numerically stable log softmax of a nonempty vector."""
    if z.ndim != 1 or z.shape[0] == 0:
        raise DimensionError("log_softmax expects a nonempty vector")
    cdef double[::1] zv = z
    cdef Py_ssize_t n = zv.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double m = zv[0], s = 0.0, lse
    for i in range(1, n):
        if zv[i] > m:
            m = zv[i]
    for i in range(n):
        s += exp(zv[i] - m)
    lse = m + log(s)
    for i in range(n):
        out[i] = zv[i] - lse
    return out_arr


def log_softmax_bwd(object o, object go):
    cdef double[::1] ov = o
    cdef double[::1] gv = go
    cdef Py_ssize_t n = ov.shape[0], i
    cdef double s = 0.0
    for i in range(n):
        s += gv[i]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = gv[i] - exp(ov[i]) * s
    return out_arr


def gru_fwd(object x, object h, object wr, object ur, object br,
            object wz, object uz, object bz, object wn, object un, object bn):
    """One GRU step; returns (h2, r, z, c).  See the python backend for
    the exact update equations."""
    if x.ndim != 1 or h.ndim != 1:
        raise DimensionError("gru expects vector x and h")
    if wr.shape != (h.shape[0], x.shape[0]) or ur.shape != (h.shape[0], h.shape[0]):
        raise DimensionError(
            "gru shape mismatch: x %r, h %r, wr %r, ur %r"
            % (x.shape, h.shape, wr.shape, ur.shape)
        )
    cdef double[::1] xv = x, hv = h, brv = br, bzv = bz, bnv = bn
    cdef double[:, ::1] wrv = wr, urv = ur, wzv = wz, uzv = uz, wnv = wn, unv = un
    cdef Py_ssize_t m = hv.shape[0], n = xv.shape[0], i, j
    h2_arr = np.empty(m)
    r_arr = np.empty(m)
    z_arr = np.empty(m)
    c_arr = np.empty(m)
    cdef double[::1] h2 = h2_arr, r = r_arr, z = z_arr, c = c_arr
    cdef double ar, az, ac
    for i in range(m):
        ar = brv[i]
        az = bzv[i]
        for j in range(n):
            ar += wrv[i, j] * xv[j]
            az += wzv[i, j] * xv[j]
        for j in range(m):
            ar += urv[i, j] * hv[j]
            az += uzv[i, j] * hv[j]
        r[i] = _sig(ar)
        z[i] = _sig(az)
    for i in range(m):
        ac = bnv[i]
        for j in range(n):
            ac += wnv[i, j] * xv[j]
        for j in range(m):
            ac += unv[i, j] * (r[j] * hv[j])
        c[i] = ctanh(ac)
        h2[i] = (1.0 - z[i]) * c[i] + z[i] * hv[i]
    return h2_arr, r_arr, z_arr, c_arr


def gru_bwd(object x, object h, object r, object z, object c,
            object wr, object ur, object wz, object uz, object wn, object un,
            object gh2, bint need_x, bint need_h, bint need_w):
    """Adjoints of gru_fwd; returns (gx, gh, pgrads) with pgrads ordered
    (gwr, gur, gbr, gwz, guz, gbz, gwn, gun, gbn)."""
    cdef double[::1] xv = x, hv = h, rv = r, zv = z, cv = c, gv = gh2
    cdef double[:, ::1] wrv = wr, urv = ur, wzv = wz, uzv = uz, wnv = wn, unv = un
    cdef Py_ssize_t m = hv.shape[0], n = xv.shape[0], i, j
    gc_arr = np.empty(m)
    gz_arr = np.empty(m)
    gq_arr = np.empty(m)
    gr_arr = np.empty(m)
    cdef double[::1] gc = gc_arr, gz = gz_arr, gq = gq_arr, gr = gr_arr
    cdef double acc
    for i in range(m):
        gc[i] = gv[i] * (1.0 - zv[i]) * (1.0 - cv[i] * cv[i])
        gz[i] = gv[i] * (hv[i] - cv[i]) * zv[i] * (1.0 - zv[i])
    for i in range(m):
        acc = 0.0
        for j in range(m):
            acc += unv[j, i] * gc[j]
        gq[i] = acc
        gr[i] = acc * hv[i] * rv[i] * (1.0 - rv[i])
    gx_arr = None
    gh_arr = None
    cdef double[::1] gx, gh
    if need_x:
        gx_arr = np.empty(n)
        gx = gx_arr
        for j in range(n):
            acc = 0.0
            for i in range(m):
                acc += wrv[i, j] * gr[i] + wzv[i, j] * gz[i] + wnv[i, j] * gc[i]
            gx[j] = acc
    if need_h:
        gh_arr = np.empty(m)
        gh = gh_arr
        for j in range(m):
            acc = gv[j] * zv[j] + gq[j] * rv[j]
            for i in range(m):
                acc += urv[i, j] * gr[i] + uzv[i, j] * gz[i]
            gh[j] = acc
    pgrads = None
    if need_w:
        pgrads = (
            np.outer(gr_arr, x),
            np.outer(gr_arr, h),
            gr_arr.copy(),
            np.outer(gz_arr, x),
            np.outer(gz_arr, h),
            gz_arr.copy(),
            np.outer(gc_arr, x),
            np.outer(gc_arr, np.multiply(r, h)),
            gc_arr.copy(),
        )
    return gx_arr, gh_arr, pgrads
