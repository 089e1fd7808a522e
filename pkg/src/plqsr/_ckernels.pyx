# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fake-quantization kernels.

Single-pass loops over the flattened tensor.  Signatures and elementwise
results match ``_pykernels`` exactly; see that module for the formulas.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, copysign

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline double _rnd(double v) noexcept nogil:
    return copysign(floor(fabs(v) + 0.5), v)


cdef inline double _clamp(double v, double lo, double hi) noexcept nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def _flat(x):
    return np.ascontiguousarray(x).ravel()


cdef void _uniform_fq(const real[::1] x, real[::1] out, double lo, double hi, double n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double step = (hi - lo) / n
    cdef double span = hi - lo
    cdef double code
    for i in range(x.shape[0]):
        code = _rnd((_clamp(x[i], lo, hi) - lo) / span * n)
        out[i] = <real>(code * step + lo)


def uniform_fq(x, double lo, double hi, int bits):
    xf = _flat(x)
    out = np.empty_like(xf)
    cdef double n = <double>(2 ** bits - 1)
    if xf.dtype == np.float32:
        _uniform_fq[float](xf, out, lo, hi, n)
    else:
        _uniform_fq[double](xf, out, lo, hi, n)
    return out.reshape(x.shape)


def uniform_codes(x, double lo, double hi, int bits):
    cdef const double[::1] xf = _flat(np.asarray(x, dtype=np.float64))
    out = np.empty(xf.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef double n = <double>(2 ** bits - 1)
    cdef Py_ssize_t i
    with nogil:
        for i in range(xf.shape[0]):
            o[i] = <cnp.int64_t>_rnd((_clamp(xf[i], lo, hi) - lo) / (hi - lo) * n)
    return out.reshape(np.shape(x))


cdef void _uniform_bwd(const real[::1] x, const real[::1] g, real[::1] gx,
                       double lo, double hi, double n, double* acc) noexcept nogil:
    cdef Py_ssize_t i
    cdef double xv, gv, frac
    cdef double g_lo = 0.0, g_hi = 0.0
    for i in range(x.shape[0]):
        xv = x[i]
        gv = g[i]
        frac = _rnd((_clamp(xv, lo, hi) - lo) / (hi - lo) * n) / n
        gx[i] = g[i] if (xv >= lo and xv <= hi) else 0
        g_hi += gv * frac
        g_lo += gv * (1.0 - frac)
    acc[0] = g_lo
    acc[1] = g_hi


def uniform_bwd(x, double lo, double hi, int bits, g):
    xf = _flat(x)
    gf = _flat(np.asarray(g, dtype=xf.dtype))
    gx = np.empty_like(xf)
    cdef double acc[2]
    cdef double n = <double>(2 ** bits - 1)
    if xf.dtype == np.float32:
        _uniform_bwd[float](xf, gf, gx, lo, hi, n, acc)
    else:
        _uniform_bwd[double](xf, gf, gx, lo, hi, n, acc)
    return gx.reshape(x.shape), acc[0], acc[1]


cdef void _sym_fq(const real[::1] w, real[::1] out, double bound, double m) noexcept nogil:
    cdef Py_ssize_t i
    cdef double step = bound / m
    cdef double code
    for i in range(w.shape[0]):
        code = _rnd(_clamp(w[i], -bound, bound) / bound * m)
        out[i] = <real>_clamp(code * step, -bound, bound)


def sym_fq(w, double bound, int bits):
    wf = _flat(w)
    out = np.empty_like(wf)
    cdef double m = <double>(2 ** (bits - 1) - 1)
    if wf.dtype == np.float32:
        _sym_fq[float](wf, out, bound, m)
    else:
        _sym_fq[double](wf, out, bound, m)
    return out.reshape(w.shape)


cdef double _sym_bwd(const real[::1] w, const real[::1] g, real[::1] gw,
                     double bound, double m) noexcept nogil:
    cdef Py_ssize_t i
    cdef double wv, acc = 0.0
    for i in range(w.shape[0]):
        wv = w[i]
        acc += g[i] * (_rnd(_clamp(wv, -bound, bound) / bound * m) / m)
        gw[i] = g[i] if (wv >= -bound and wv <= bound) else 0
    return acc


def sym_bwd(w, double bound, int bits, g):
    wf = _flat(w)
    gf = _flat(np.asarray(g, dtype=wf.dtype))
    gw = np.empty_like(wf)
    cdef double m = <double>(2 ** (bits - 1) - 1)
    cdef double acc
    if wf.dtype == np.float32:
        acc = _sym_bwd[float](wf, gf, gw, bound, m)
    else:
        acc = _sym_bwd[double](wf, gf, gw, bound, m)
    return gw.reshape(w.shape), acc


cdef inline double _pw_code(double xv, double la, double ua, double bp,
                            double m, double n, int* region) noexcept nogil:
    if xv < -bp:
        region[0] = 1
        return _rnd((_clamp(xv, la, -bp) - la) / (-bp - la) * n)
    if xv > bp:
        region[0] = 2
        return _rnd((_clamp(xv, bp, ua) - bp) / (ua - bp) * n)
    region[0] = 0
    return _rnd(_clamp(xv, -bp, bp) / (2.0 * bp) * m)


cdef void _piecewise_fq(const real[::1] x, real[::1] out, double la, double ua,
                        double bp, double m, double n) noexcept nogil:
    cdef Py_ssize_t i
    cdef int region
    cdef double code, q
    cdef double step_d = (2.0 * bp) / m
    cdef double step_n = (-bp - la) / n
    cdef double step_p = (ua - bp) / n
    for i in range(x.shape[0]):
        code = _pw_code(x[i], la, ua, bp, m, n, &region)
        if region == 1:
            q = _clamp(code * step_n + la, la, -bp)
        elif region == 2:
            q = _clamp(code * step_p + bp, bp, ua)
        else:
            q = _clamp(code * step_d, -bp, bp)
        out[i] = <real>q


def piecewise_fq(x, double la, double ua, double bp, int bits):
    xf = _flat(x)
    out = np.empty_like(xf)
    cdef double m = <double>(2 ** (bits - 1) - 1)
    cdef double n = <double>(2 ** (bits - 2) - 1)
    if xf.dtype == np.float32:
        _piecewise_fq[float](xf, out, la, ua, bp, m, n)
    else:
        _piecewise_fq[double](xf, out, la, ua, bp, m, n)
    return out.reshape(x.shape)


def piecewise_codes(x, double la, double ua, double bp, int bits):
    cdef const double[::1] xf = _flat(np.asarray(x, dtype=np.float64))
    codes = np.empty(xf.shape[0], dtype=np.int64)
    regions = np.empty(xf.shape[0], dtype=np.int8)
    cdef cnp.int64_t[::1] c = codes
    cdef cnp.int8_t[::1] r = regions
    cdef double m = <double>(2 ** (bits - 1) - 1)
    cdef double n = <double>(2 ** (bits - 2) - 1)
    cdef int region
    cdef Py_ssize_t i
    with nogil:
        for i in range(xf.shape[0]):
            c[i] = <cnp.int64_t>_pw_code(xf[i], la, ua, bp, m, n, &region)
            r[i] = <cnp.int8_t>region
    shape = np.shape(x)
    return regions.reshape(shape), codes.reshape(shape)


cdef void _piecewise_bwd(const real[::1] x, const real[::1] g, real[::1] gx,
                         double la, double ua, double bp, double m, double n,
                         double* acc) noexcept nogil:
    cdef Py_ssize_t i
    cdef int region
    cdef double xv, gv, code, frac, qd
    cdef double g_la = 0.0, g_ua = 0.0, g_bp = 0.0
    cdef double step_d = (2.0 * bp) / m
    for i in range(x.shape[0]):
        xv = x[i]
        gv = g[i]
        code = _pw_code(xv, la, ua, bp, m, n, &region)
        if region == 1:
            frac = code / n
            g_bp += gv * (-frac)
            g_la += gv * (1.0 - frac)
            g_ua += gv * 0.0
        elif region == 2:
            frac = code / n
            g_bp += gv * (1.0 - frac)
            g_la += gv * 0.0
            g_ua += gv * frac
        else:
            qd = _clamp(code * step_d, -bp, bp)
            g_bp += gv * (qd / bp)
            g_la += gv * 0.0
            g_ua += gv * 0.0
        gx[i] = g[i] if (xv >= la and xv <= ua) else 0
    acc[0] = g_la
    acc[1] = g_ua
    acc[2] = g_bp


def piecewise_bwd(x, double la, double ua, double bp, int bits, g):
    xf = _flat(x)
    gf = _flat(np.asarray(g, dtype=xf.dtype))
    gx = np.empty_like(xf)
    cdef double acc[3]
    cdef double m = <double>(2 ** (bits - 1) - 1)
    cdef double n = <double>(2 ** (bits - 2) - 1)
    if xf.dtype == np.float32:
        _piecewise_bwd[float](xf, gf, gx, la, ua, bp, m, n, acc)
    else:
        _piecewise_bwd[double](xf, gf, gx, la, ua, bp, m, n, acc)
    return gx.reshape(x.shape), acc[0], acc[1], acc[2]


cdef void _im2col(const real[:, :, :, ::1] xp, real[:, :, :, :, :, ::1] cols) noexcept nogil:
    cdef Py_ssize_t c, i, j, b, y, x
    cdef Py_ssize_t C = cols.shape[0], KH = cols.shape[1], KW = cols.shape[2]
    cdef Py_ssize_t N = cols.shape[3], HO = cols.shape[4], WO = cols.shape[5]
    for c in range(C):
        for i in range(KH):
            for j in range(KW):
                for b in range(N):
                    for y in range(HO):
                        for x in range(WO):
                            cols[c, i, j, b, y, x] = xp[b, c, y + i, x + j]


def im2col(xp, int kh, int kw, int ho, int wo):
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    if xp.dtype == np.float32:
        _im2col[float](xp, cols)
    else:
        _im2col[double](xp, cols)
    return cols.reshape(c * kh * kw, n * ho * wo)


cdef void _col2im(const real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t c, i, j, b, y, x
    cdef Py_ssize_t C = cols.shape[0], KH = cols.shape[1], KW = cols.shape[2]
    cdef Py_ssize_t N = cols.shape[3], HO = cols.shape[4], WO = cols.shape[5]
    # same (i, j) accumulation order as the NumPy fallback
    for i in range(KH):
        for j in range(KW):
            for b in range(N):
                for c in range(C):
                    for y in range(HO):
                        for x in range(WO):
                            out[b, c, y + i, x + j] += cols[c, i, j, b, y, x]


def col2im(cols, int n, int c, int hp, int wp, int kh, int kw, int ho, int wo):
    cols = np.ascontiguousarray(cols).reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out)
    else:
        _col2im[double](cols, out)
    return out
