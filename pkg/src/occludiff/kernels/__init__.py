"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Every kernel exists in both ``numba_impl`` and ``numpy_impl`` with identical
signatures; the backend choice (see ``occludiff.backend``) is made once at
import time.  Wrappers here own the shape bookkeeping (padding, output size)
so the two implementations stay minimal and interchangeable.

Layout conventions: images are NHWC, convolution weights are (KH, KW, Cin,
Cout), all arrays C-contiguous float32 or float64.
"""

import numpy as np

from ..backend import active_backend

if active_backend() == "numba":
    from . import numba_impl as _impl
else:
    from . import numpy_impl as _impl


def conv2d_output_hw(height, width, kh, kw, stride, pad):
    return (height + 2 * pad - kh) // stride + 1, (width + 2 * pad - kw) // stride + 1


def _pad_nhwc(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of NHWC ``x`` with ``w`` plus per-channel bias."""
    B, H, W, Cin = x.shape
    KH, KW, wcin, Cout = w.shape
    if wcin != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels, kernel expects {wcin}")
    ho, wo = conv2d_output_hw(H, W, KH, KW, stride, pad)
    xp = np.ascontiguousarray(_pad_nhwc(x, pad))
    return _impl.conv2d_forward_padded(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, ho, wo)


def conv2d_backward(x, w, dout, stride=1, pad=0):
    """Gradients (dx, dw, db) for :func:`conv2d_forward`."""
    B, H, W, Cin = x.shape
    xp = np.ascontiguousarray(_pad_nhwc(x, pad))
    dxp, dw, db = _impl.conv2d_backward_padded(
        xp, np.ascontiguousarray(w), np.ascontiguousarray(dout), stride
    )
    if pad:
        dx = dxp[:, pad : pad + H, pad : pad + W, :]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


def scale_combine(a, x, b, y):
    """a*x + b*y with scalar coefficients, preserving the array dtype."""
    a = x.dtype.type(a)
    b = x.dtype.type(b)
    return _impl.scale_combine(a, np.ascontiguousarray(x), b, np.ascontiguousarray(y))


def masked_merge(mask, known, unknown):
    """mask*known + (1-mask)*unknown, elementwise; mask broadcast-compatible."""
    m = np.broadcast_to(mask, known.shape).astype(known.dtype, copy=False)
    return _impl.masked_merge(
        np.ascontiguousarray(m), np.ascontiguousarray(known), np.ascontiguousarray(unknown)
    )


def silu_forward(x):
    """x * sigmoid(x); returns (activation, sigmoid) so backward can reuse it."""
    x = np.ascontiguousarray(x)
    return _impl.silu_forward(x)


def silu_backward(dout, x, s):
    """Gradient of silu_forward given its cached input and sigmoid."""
    return _impl.silu_backward(
        np.ascontiguousarray(dout), np.ascontiguousarray(x), np.ascontiguousarray(s)
    )


def sigmoid(x):
    """Numerically stable logistic function."""
    return _impl.sigmoid(np.ascontiguousarray(x))
