"""Numba @njit kernel implementations.

Plain njit (no prange): loops are written so every output element is owned by
exactly one iteration, keeping results run-to-run reproducible.  fastmath is
on for the convolutions so LLVM may vectorize the reductions; the codepath is
fixed at compile time, so results stay deterministic for identical inputs.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d_forward_padded(xp, w, b, stride, ho, wo):
    B = xp.shape[0]
    KH, KW, Cin, Cout = w.shape
    out = np.empty((B, ho, wo, Cout), dtype=xp.dtype)
    for bi in range(B):
        for i in range(ho):
            for j in range(wo):
                for co in range(Cout):
                    out[bi, i, j, co] = b[co]
                for kh in range(KH):
                    ii = i * stride + kh
                    for kw in range(KW):
                        jj = j * stride + kw
                        for ci in range(Cin):
                            xv = xp[bi, ii, jj, ci]
                            for co in range(Cout):
                                out[bi, i, j, co] += xv * w[kh, kw, ci, co]
    return out


@njit(cache=True, fastmath=True)
def conv2d_backward_padded(xp, w, dout, stride):
    B, Hp, Wp, Cin = xp.shape
    KH, KW, _, Cout = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = np.zeros(Cout, dtype=w.dtype)
    for bi in range(B):
        for i in range(ho):
            for j in range(wo):
                for co in range(Cout):
                    db[co] += dout[bi, i, j, co]
                for kh in range(KH):
                    ii = i * stride + kh
                    for kw in range(KW):
                        jj = j * stride + kw
                        for ci in range(Cin):
                            xv = xp[bi, ii, jj, ci]
                            acc = dxp[bi, ii, jj, ci]
                            for co in range(Cout):
                                d = dout[bi, i, j, co]
                                dw[kh, kw, ci, co] += xv * d
                                acc += w[kh, kw, ci, co] * d
                            dxp[bi, ii, jj, ci] = acc
    return dxp, dw, db


@njit(cache=True)
def scale_combine(a, x, b, y):
    out = np.empty_like(x)
    xf = x.ravel()
    yf = y.ravel()
    of = out.ravel()
    for i in range(xf.size):
        of[i] = a * xf[i] + b * yf[i]
    return out


@njit(cache=True)
def masked_merge(mask, known, unknown):
    # exact for binary masks: 1-m is 0 or 1 in any precision
    out = np.empty_like(known)
    mf = mask.ravel()
    kf = known.ravel()
    uf = unknown.ravel()
    of = out.ravel()
    for i in range(kf.size):
        of[i] = mf[i] * kf[i] + (1.0 - mf[i]) * uf[i]
    return out


@njit(cache=True)
def sigmoid(x):
    out = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    one = x.dtype.type(1.0)
    for i in range(xf.size):
        v = xf[i]
        if v >= 0:
            of[i] = one / (one + np.exp(-v))
        else:
            e = np.exp(v)
            of[i] = e / (one + e)
    return out


@njit(cache=True)
def silu_forward(x):
    s = sigmoid(x)
    return x * s, s


@njit(cache=True)
def silu_backward(dout, x, s):
    out = np.empty_like(dout)
    df = dout.ravel()
    xf = x.ravel()
    sf = s.ravel()
    of = out.ravel()
    one = dout.dtype.type(1.0)
    for i in range(df.size):
        si = sf[i]
        of[i] = df[i] * (si * (one + xf[i] * (one - si)))
    return out
