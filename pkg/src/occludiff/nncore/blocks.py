"""Differentiable blocks with hand-written backward passes.

Each block caches what its backward needs during forward and releases the
cache when backward consumes it, so backward-without-forward and a second
backward without a fresh forward are both rejected (gradient accumulation
across backward calls is deliberately not supported).  A model instance is
single-threaded; separate instances share nothing.
"""

import numpy as np

from .. import kernels


class ShapeError(ValueError):
    """Input shape incompatible with a block, named in the message."""


class BackwardStateError(RuntimeError):
    """backward() called without a matching forward()."""


class ParamBlock:
    """Named trainable tensor plus its gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def to_dtype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamBlock({self.name!r}, shape={self.value.shape})"


def _sigmoid(x):
    return kernels.sigmoid(np.ascontiguousarray(x))


class Block:
    def __init__(self, name):
        self.name = name
        self._cache = None

    def params(self):
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardStateError(
                f"block '{self.name}': backward called without a preceding forward"
            )
        cache, self._cache = self._cache, None
        return cache

    @property
    def dtype(self):
        ps = self.params()
        return ps[0].value.dtype if ps else None

    def to_dtype(self, dtype):
        for p in self.params():
            p.to_dtype(dtype)

    def __call__(self, x):
        return self.forward(x)


class Identity(Block):
    def __init__(self, name="identity"):
        super().__init__(name)

    def forward(self, x):
        self._cache = True
        return x

    def backward(self, dout):
        self._take_cache()
        return dout


class Affine(Block):
    """y = x @ W + b for 2-D batched inputs."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, name="affine"):
        super().__init__(name)
        scale = 1.0 / np.sqrt(in_dim)
        w = (rng.standard_normal((in_dim, out_dim)) * scale).astype(dtype)
        self.w = ParamBlock(f"{name}.w", w)
        self.b = ParamBlock(f"{name}.b", np.zeros(out_dim, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ShapeError(
                f"block '{self.name}': expected input (B, {self.w.shape[0]}), got {x.shape}"
            )
        x = np.ascontiguousarray(x, dtype=self.w.value.dtype)
        self._cache = x
        return x @ self.w.value + self.b.value

    def backward(self, dout):
        x = self._take_cache()
        self.w.grad = x.T @ dout
        self.b.grad = dout.sum(axis=0)
        return dout @ self.w.value.T


class Conv2d(Block):
    """NHWC cross-correlation; pad defaults to 'same' for stride 1."""

    def __init__(self, kh, kw, cin, cout, rng, stride=1, pad=None, dtype=np.float32, name="conv"):
        super().__init__(name)
        if pad is None:
            pad = (kh - 1) // 2
        self.stride = stride
        self.pad = pad
        scale = 1.0 / np.sqrt(kh * kw * cin)
        w = (rng.standard_normal((kh, kw, cin, cout)) * scale).astype(dtype)
        self.w = ParamBlock(f"{name}.w", w)
        self.b = ParamBlock(f"{name}.b", np.zeros(cout, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.w.shape[2]:
            raise ShapeError(
                f"block '{self.name}': expected input (B, H, W, {self.w.shape[2]}), got {x.shape}"
            )
        x = np.ascontiguousarray(x, dtype=self.w.value.dtype)
        self._cache = x
        return kernels.conv2d_forward(x, self.w.value, self.b.value, self.stride, self.pad)

    def backward(self, dout):
        x = self._take_cache()
        dout = np.ascontiguousarray(dout, dtype=self.w.value.dtype)
        dx, dw, db = kernels.conv2d_backward(x, self.w.value, dout, self.stride, self.pad)
        self.w.grad = dw
        self.b.grad = db
        return dx


class SiLU(Block):
    """x * sigmoid(x); smooth, so finite-difference checks stay clean."""

    def __init__(self, name="silu"):
        super().__init__(name)

    def forward(self, x):
        out, s = kernels.silu_forward(x)
        self._cache = (np.ascontiguousarray(x), s)
        return out

    def backward(self, dout):
        x, s = self._take_cache()
        return kernels.silu_backward(dout, x, s)


class Flatten(Block):
    def __init__(self, name="flatten"):
        super().__init__(name)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        shape = self._take_cache()
        return dout.reshape(shape)


class Upsample2(Block):
    """Nearest-neighbor 2x spatial upsampling on NHWC; backward sums each
    2x2 cell back onto its source pixel."""

    def __init__(self, name="upsample2"):
        super().__init__(name)

    def forward(self, x):
        self._cache = x.shape
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dout):
        b, h, w, c = self._take_cache()
        return dout.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))


class EmbeddingLookup(Block):
    """Learned row lookup; backward scatter-adds into the table, returns None
    (integer indices carry no gradient)."""

    def __init__(self, count, dim, rng, dtype=np.float32, scale=0.1, name="embedding"):
        super().__init__(name)
        table = (rng.standard_normal((count, dim)) * scale).astype(dtype)
        self.table = ParamBlock(f"{name}.table", table)

    def params(self):
        return [self.table]

    def forward(self, idx):
        idx = np.asarray(idx)
        if idx.ndim != 1:
            raise ShapeError(f"block '{self.name}': expected 1-D index array, got {idx.shape}")
        if idx.min(initial=0) < 0 or idx.max(initial=-1) >= self.table.shape[0]:
            raise ShapeError(
                f"block '{self.name}': index out of range for table of {self.table.shape[0]}"
            )
        self._cache = idx
        return self.table.value[idx]

    def backward(self, dout):
        idx = self._take_cache()
        grad = np.zeros_like(self.table.value)
        np.add.at(grad, idx, dout)
        self.table.grad = grad
        return None


class Model(Block):
    """Sequential composition of blocks; parameter names must be unique."""

    def __init__(self, blocks, name="model"):
        super().__init__(name)
        self.blocks = list(blocks)
        names = [p.name for p in self.params()]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"model '{name}': duplicate parameter names {dupes}")

    def params(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        return out

    def forward(self, x):
        for blk in self.blocks:
            x = blk.forward(x)
        self._cache = True
        return x

    def backward(self, dout):
        self._take_cache()
        for blk in reversed(self.blocks):
            dout = blk.backward(dout)
        return dout

    def zero_grad(self):
        for p in self.params():
            p.grad = np.zeros_like(p.value)
