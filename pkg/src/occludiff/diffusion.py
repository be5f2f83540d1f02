"""Denoising-diffusion core: noise schedule, forward noising, reverse step,
and denoiser training on the noise-prediction objective.

Timesteps are 1-based (t in 1..T); schedule tables are stored in float64 and
cast at the point of use.  The reverse-step variance is the fixed untrained
choice sigma_t^2 = beta_t, and the final step (t=1) omits its noise term so
the last transition is deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .nncore import (
    Adam,
    Affine,
    Conv2d,
    SiLU,
    ShapeError,
    make_rng,
    sample_standard_normal,
)
from .nncore.blocks import Block, EmbeddingLookup, Upsample2
from .nncore.losses import mse_loss


@dataclass
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha-bar tables for a horizon T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range 1..{self.T}")

    def beta_at(self, t):
        self._check_t(t)
        return self.beta[t - 1]

    def alpha_at(self, t):
        self._check_t(t)
        return self.alpha[t - 1]

    def alpha_bar_at(self, t):
        self._check_t(t)
        return self.alpha_bar[t - 1]


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError(f"schedule horizon must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta bounds ({beta_start}, {beta_end})")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(x0, t, eps, sched):
    """Single-jump forward noising: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"q_sample: eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar_at(t)
    return kernels.scale_combine(np.sqrt(ab), x0, np.sqrt(1.0 - ab), eps)


def q_sample_batch(x0, t, eps, sched):
    """q_sample with a per-sample timestep vector (training hot path)."""
    t = np.asarray(t)
    if t.min() < 1 or t.max() > sched.T:
        raise ValueError(f"timestep out of range 1..{sched.T}")
    ab = sched.alpha_bar[t - 1].astype(x0.dtype)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return np.sqrt(ab).reshape(shape) * x0 + np.sqrt(1.0 - ab).reshape(shape) * eps


def posterior_mean(x_t, t, eps_hat, sched):
    """Reverse-step mean: (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"posterior_mean: eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    a = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    b = sched.beta_at(t)
    inv_sqrt_a = 1.0 / np.sqrt(a)
    coef = b / np.sqrt(1.0 - ab)
    return kernels.scale_combine(inv_sqrt_a, x_t, -inv_sqrt_a * coef, eps_hat)


def p_sample(model, x_t, t, rng, sched):
    """One reverse transition x_t -> x_{t-1}; deterministic at t=1."""
    eps_hat = model.predict(x_t, t)
    mean = posterior_mean(x_t, t, eps_hat, sched)
    if t == 1:
        return mean
    sigma = np.sqrt(sched.beta_at(t))
    z = sample_standard_normal(rng, x_t.shape, dtype=x_t.dtype)
    return kernels.scale_combine(1.0, mean, sigma, z)


class DenoiserModel(Block):
    """Convolutional noise predictor: a two-level encoder/decoder with
    additive skips and a learned timestep embedding.

    Two stride-2 stages push the receptive field past twenty pixels, so the
    synthesized region of a half-occluded 32x32 image still sees observed
    context; channel width stays flat to keep walks cheap.  Output shape
    equals input shape (predicts the injected noise).  Height and width must
    be divisible by 4.
    """

    def __init__(self, image_shape, T, channels=16, temb_dim=16, seed=0, dtype=np.float32):
        super().__init__("denoiser")
        rng = make_rng(seed)
        h, w, c = image_shape
        if h % 4 or w % 4:
            raise ValueError(
                f"denoiser needs height and width divisible by 4, got {h}x{w}"
            )
        self.image_shape = (h, w, c)
        self.T = T
        self.channels = channels
        ch = channels
        self.temb = EmbeddingLookup(T, temb_dim, rng, dtype=dtype, name="denoiser.temb")
        self.temb_proj = Affine(temb_dim, ch, rng, dtype=dtype, name="denoiser.temb_proj")
        self.conv_in = Conv2d(3, 3, c, ch, rng, dtype=dtype, name="denoiser.conv_in")
        self.act1 = SiLU("denoiser.act1")
        self.down1 = Conv2d(3, 3, ch, ch, rng, stride=2, dtype=dtype, name="denoiser.down1")
        self.act2 = SiLU("denoiser.act2")
        self.mid1 = Conv2d(3, 3, ch, ch, rng, dtype=dtype, name="denoiser.mid1")
        self.act3 = SiLU("denoiser.act3")
        self.down2 = Conv2d(3, 3, ch, ch, rng, stride=2, dtype=dtype, name="denoiser.down2")
        self.act4 = SiLU("denoiser.act4")
        self.mid2 = Conv2d(3, 3, ch, ch, rng, dtype=dtype, name="denoiser.mid2")
        self.act5 = SiLU("denoiser.act5")
        self.up1 = Upsample2("denoiser.up1")
        self.red1 = Conv2d(3, 3, ch, ch, rng, dtype=dtype, name="denoiser.red1")
        self.act6 = SiLU("denoiser.act6")
        self.up2 = Upsample2("denoiser.up2")
        self.conv_out = Conv2d(3, 3, ch, c, rng, dtype=dtype, name="denoiser.conv_out")

    def _blocks(self):
        return (self.temb, self.temb_proj, self.conv_in, self.act1,
                self.down1, self.act2, self.mid1, self.act3,
                self.down2, self.act4, self.mid2, self.act5,
                self.up1, self.red1, self.act6, self.up2, self.conv_out)

    def params(self):
        out = []
        for blk in self._blocks():
            out.extend(blk.params())
        return out

    def to_dtype(self, dtype):
        for blk in self._blocks():
            blk.to_dtype(dtype)

    def forward(self, x, t):
        """x: (B, H, W, C); t: (B,) 1-based timesteps."""
        if x.ndim != 4 or x.shape[1:] != self.image_shape:
            raise ShapeError(
                f"block 'denoiser': expected input (B, {self.image_shape}), got {x.shape}"
            )
        t = np.asarray(t)
        if t.shape != (x.shape[0],):
            raise ShapeError(f"block 'denoiser': expected {x.shape[0]} timesteps, got {t.shape}")
        emb = self.temb.forward(t - 1)
        cond = self.temb_proj.forward(emb)
        h1 = self.act1.forward(self.conv_in.forward(x) + cond[:, None, None, :])
        h2 = self.act2.forward(self.down1.forward(h1))
        h3 = self.act3.forward(self.mid1.forward(h2))
        h4 = self.act4.forward(self.down2.forward(h3))
        h5 = self.act5.forward(self.mid2.forward(h4))
        h6 = self.act6.forward(self.red1.forward(self.up1.forward(h5))) + h3
        out = self.conv_out.forward(self.up2.forward(h6) + h1)
        self._cache = True
        return out

    def backward(self, dout):
        self._take_cache()
        d = self.conv_out.backward(dout)
        d_h1 = d  # skip into the final add
        d_h6 = self.up2.backward(d)
        d_h3 = d_h6  # skip into the mid-level add
        d = self.red1.backward(self.act6.backward(d_h6))
        d = self.act5.backward(self.up1.backward(d))
        d = self.act4.backward(self.mid2.backward(d))
        d_h3 = d_h3 + self.down2.backward(d)
        d = self.act3.backward(d_h3)
        d = self.act2.backward(self.mid1.backward(d))
        d = self.act1.backward(self.down1.backward(d) + d_h1)
        dx = self.conv_in.backward(d)
        dcond = d.sum(axis=(1, 2))
        demb = self.temb_proj.backward(dcond)
        self.temb.backward(demb)
        return dx

    def clear_caches(self):
        self._cache = None
        for blk in self._blocks():
            blk._cache = None

    def predict(self, x, t):
        """Inference helper: accepts a scalar t or per-sample vector, and a
        single (H, W, C) image or a batch.  Drops caches afterwards so large
        sampling batches do not pin activation memory."""
        single = x.ndim == 3
        xb = x[None] if single else x
        tb = np.full(xb.shape[0], t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t)
        out = self.forward(xb, tb)
        self.clear_caches()
        return out[0] if single else out

    def zero_grad(self):
        for p in self.params():
            p.grad = np.zeros_like(p.value)


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,mean_loss\n")
            for i, loss in enumerate(self.epoch_losses, start=1):
                fh.write(f"{i},{loss!r}\n")


def denoiser_batch_loss(model, x0, t, eps, sched):
    """Noise-prediction loss on one batch; returns (loss, dpred)."""
    x_t = q_sample_batch(x0, t, eps, sched)
    pred = model.forward(x_t, t)
    return mse_loss(pred, eps)


def train_denoiser(images, sched, epochs, batch_size, lr, seed, model=None, channels=16):
    """Fit the noise predictor on clean images; returns (model, TrainLog).

    Uses uniformly sampled timesteps and fresh Gaussian noise per sample,
    Adam updates, and logs the mean per-batch loss each epoch.  Aborts on a
    non-finite loss, naming the batch.
    """
    images = np.ascontiguousarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("train_denoiser: expected a nonempty (N, H, W, C) image array")
    if model is None:
        model = DenoiserModel(images.shape[1:], sched.T, channels=channels, seed=seed)
    rng = make_rng(seed)
    opt = Adam(model.params(), lr=lr)
    log = TrainLog()
    n = images.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = sample_standard_normal(rng, x0.shape, dtype=np.float32)
            loss, dpred = denoiser_batch_loss(model, x0, t, eps, sched)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"train_denoiser: non-finite loss at epoch {epoch + 1}, "
                    f"batch {start // batch_size}"
                )
            model.backward(dpred)
            opt.step()
            epoch_losses.append(loss)
        log.epoch_losses.append(float(np.mean(epoch_losses)))
    return model, log
