"""Pure-numpy kernel implementations (im2col convolutions)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(xp, kh, kw, stride, ho, wo):
    # (B, Hp-KH+1, Wp-KW+1, Cin, KH, KW) -> strided -> (B*Ho*Wo, KH*KW*Cin)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, cin = xp.shape[0], xp.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * ho * wo, kh * kw * cin)


def conv2d_forward_padded(xp, w, b, stride, ho, wo):
    B = xp.shape[0]
    KH, KW, Cin, Cout = w.shape
    cols = _cols(xp, KH, KW, stride, ho, wo)
    out = cols @ w.reshape(KH * KW * Cin, Cout)
    out += b
    return out.reshape(B, ho, wo, Cout)


def conv2d_backward_padded(xp, w, dout, stride):
    B, Hp, Wp, Cin = xp.shape
    KH, KW, _, Cout = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dflat = dout.reshape(B * ho * wo, Cout)

    db = dout.sum(axis=(0, 1, 2))
    cols = _cols(xp, KH, KW, stride, ho, wo)
    dw = (cols.T @ dflat).reshape(KH, KW, Cin, Cout)

    dcols = (dflat @ w.reshape(KH * KW * Cin, Cout).T).reshape(B, ho, wo, KH, KW, Cin)
    dxp = np.zeros_like(xp)
    for kh in range(KH):
        for kw in range(KW):
            dxp[:, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride, :] += dcols[
                :, :, :, kh, kw, :
            ]
    return dxp, dw, db


def scale_combine(a, x, b, y):
    return a * x + b * y


def masked_merge(mask, known, unknown):
    return mask * known + (1.0 - mask) * unknown


def sigmoid(x):
    # one exp over the magnitudes keeps both tails stable
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu_forward(x):
    s = sigmoid(x)
    return x * s, s


def silu_backward(dout, x, s):
    return dout * (s * (1.0 + x * (1.0 - s)))
