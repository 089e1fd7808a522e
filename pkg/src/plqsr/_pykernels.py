"""NumPy implementations of the fake-quantization kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Elementwise outputs of the two backends are bitwise identical: both compute in
double precision with the same operation order and cast back to the input
dtype.  Parameter-gradient sums agree to rounding (pairwise vs sequential
accumulation).
"""

import numpy as np


def _rnd(v):
    # round half away from zero
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64).ravel()


def uniform_codes(x, lo, hi, bits):
    n = float(2 ** bits - 1)
    v = np.minimum(np.maximum(_f64(x), lo), hi)
    return _rnd((v - lo) / (hi - lo) * n).astype(np.int64).reshape(np.shape(x))


def uniform_fq(x, lo, hi, bits):
    n = float(2 ** bits - 1)
    step = (hi - lo) / n
    v = np.minimum(np.maximum(_f64(x), lo), hi)
    code = _rnd((v - lo) / (hi - lo) * n)
    return (code * step + lo).astype(x.dtype).reshape(x.shape)


def uniform_bwd(x, lo, hi, bits, g):
    n = float(2 ** bits - 1)
    xd = _f64(x)
    gd = _f64(g)
    v = np.minimum(np.maximum(xd, lo), hi)
    frac = _rnd((v - lo) / (hi - lo) * n) / n
    inside = (xd >= lo) & (xd <= hi)
    gx = np.where(inside, gd, 0.0).astype(x.dtype).reshape(x.shape)
    g_hi = float(np.sum(gd * frac))
    g_lo = float(np.sum(gd * (1.0 - frac)))
    return gx, g_lo, g_hi


def sym_fq(w, bound, bits):
    m = float(2 ** (bits - 1) - 1)
    step = bound / m
    v = np.minimum(np.maximum(_f64(w), -bound), bound)
    code = _rnd(v / bound * m)
    q = np.minimum(np.maximum(code * step, -bound), bound)
    return q.astype(w.dtype).reshape(w.shape)


def sym_bwd(w, bound, bits, g):
    m = float(2 ** (bits - 1) - 1)
    wd = _f64(w)
    gd = _f64(g)
    v = np.minimum(np.maximum(wd, -bound), bound)
    frac = _rnd(v / bound * m) / m
    inside = (wd >= -bound) & (wd <= bound)
    gw = np.where(inside, gd, 0.0).astype(w.dtype).reshape(w.shape)
    return gw, float(np.sum(gd * frac))


def _piecewise_parts(xd, la, ua, bp, bits):
    m = float(2 ** (bits - 1) - 1)
    n = float(2 ** (bits - 2) - 1)
    neg = xd < -bp
    pos = xd > bp
    dense = ~(neg | pos)

    two_bp = 2.0 * bp
    vd = np.minimum(np.maximum(xd, -bp), bp)
    cd = _rnd(vd / two_bp * m)

    span_n = -bp - la
    vn = np.minimum(np.maximum(xd, la), -bp)
    cn = _rnd((vn - la) / span_n * n)

    span_p = ua - bp
    vp = np.minimum(np.maximum(xd, bp), ua)
    cp = _rnd((vp - bp) / span_p * n)

    code = np.where(neg, cn, np.where(pos, cp, cd))
    region = np.where(neg, 1, np.where(pos, 2, 0)).astype(np.int8)
    return dense, neg, pos, cd, cn, cp, code, region


def piecewise_codes(x, la, ua, bp, bits):
    """Return ``(region, code)``; region 0 dense, 1 negative, 2 positive outlier."""
    parts = _piecewise_parts(_f64(x), la, ua, bp, bits)
    shape = np.shape(x)
    return parts[7].reshape(shape), parts[6].astype(np.int64).reshape(shape)


def piecewise_fq(x, la, ua, bp, bits):
    m = float(2 ** (bits - 1) - 1)
    n = float(2 ** (bits - 2) - 1)
    xd = _f64(x)
    dense, neg, pos, cd, cn, cp, _, _ = _piecewise_parts(xd, la, ua, bp, bits)
    qd = np.minimum(np.maximum(cd * ((2.0 * bp) / m), -bp), bp)
    qn = np.minimum(np.maximum(cn * ((-bp - la) / n) + la, la), -bp)
    qp = np.minimum(np.maximum(cp * ((ua - bp) / n) + bp, bp), ua)
    q = np.where(neg, qn, np.where(pos, qp, qd))
    return q.astype(x.dtype).reshape(x.shape)


def piecewise_bwd(x, la, ua, bp, bits, g):
    """STE input gradient and fixed-code gradients for ``(l_a, u_a, bp)``."""
    m = float(2 ** (bits - 1) - 1)
    n = float(2 ** (bits - 2) - 1)
    xd = _f64(x)
    gd = _f64(g)
    dense, neg, pos, cd, cn, cp, _, _ = _piecewise_parts(xd, la, ua, bp, bits)

    qd = np.minimum(np.maximum(cd * ((2.0 * bp) / m), -bp), bp)
    fn = cn / n
    fp = cp / n
    d_bp = np.where(neg, -fn, np.where(pos, 1.0 - fp, qd / bp))
    d_la = np.where(neg, 1.0 - fn, 0.0)
    d_ua = np.where(pos, fp, 0.0)

    inside = (xd >= la) & (xd <= ua)
    gx = np.where(inside, gd, 0.0).astype(x.dtype).reshape(x.shape)
    return (
        gx,
        float(np.sum(gd * d_la)),
        float(np.sum(gd * d_ua)),
        float(np.sum(gd * d_bp)),
    )


def im2col(xp, kh, kw, ho, wo):
    """Padded (N, C, Hp, Wp) -> (C*kh*kw, N*ho*wo) columns, stride 1."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + ho, j : j + wo].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, n, c, hp, wp, kh, kw, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back to (N, C, Hp, Wp)."""
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out
