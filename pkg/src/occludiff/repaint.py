"""Mask-guided inpainting on top of the reverse diffusion walk.

The walk is resampled: the schedule is split from the top into blocks of j
timesteps, and each block is denoised r times, jumping back up with forward
renoising between repeats.  At every denoise step the known (mask=1) region
is replaced by a freshly noised copy of the observed pixels, so only the
occluded region is ever synthesized.  Masks are binary (H, W) arrays with 1
marking observed pixels.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffusion import p_sample, posterior_mean, q_sample
from .nncore import sample_standard_normal


class MaskError(ValueError):
    """Mask is non-binary or does not match the image grid."""


def check_mask(mask, hw):
    """Validate a binary occlusion mask against an (H, W) grid; returns it
    as float32."""
    mask = np.asarray(mask)
    if mask.shape != tuple(hw):
        raise MaskError(f"mask shape {mask.shape} does not match image grid {tuple(hw)}")
    mask = mask.astype(np.float32)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise MaskError("mask must contain only 0 and 1")
    return mask


@dataclass(frozen=True)
class RepaintPlan:
    """Ordered walk over timesteps: ('denoise', t) maps x_t -> x_{t-1},
    ('renoise', t) maps x_{t-1} -> x_t."""

    T: int
    r: int
    j: int
    steps: tuple

    @property
    def n_denoise(self):
        return sum(1 for kind, _ in self.steps if kind == "denoise")

    @property
    def n_renoise(self):
        return sum(1 for kind, _ in self.steps if kind == "renoise")


def build_plan(T, r, j):
    """Resampled schedule: per block of j timesteps (from the top), (r-1)
    rounds of denoise-then-renoise followed by one final denoise pass.

    Totals r*T denoise steps and (r-1)*T renoise steps when j divides T; a
    shorter bottom block is handled the same way.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if r < 1:
        raise ValueError(f"resample count r must be >= 1, got {r}")
    if not 1 <= j <= T:
        raise ValueError(f"jump length j must be in 1..{T}, got {j}")
    steps = []
    t_hi = T
    while t_hi >= 1:
        t_lo = max(1, t_hi - j + 1)
        down = [("denoise", t) for t in range(t_hi, t_lo - 1, -1)]
        up = [("renoise", t) for t in range(t_lo, t_hi + 1)]
        for _ in range(r - 1):
            steps.extend(down)
            steps.extend(up)
        steps.extend(down)
        t_hi = t_lo - 1
    return RepaintPlan(T=T, r=r, j=j, steps=tuple(steps))


def renoise(x_prev, t, eps, sched):
    """One forward step x_{t-1} -> x_t: sqrt(1-beta_t)*x_prev + sqrt(beta_t)*eps."""
    x_prev = np.asarray(x_prev)
    eps = np.asarray(eps)
    if eps.shape != x_prev.shape:
        raise ValueError(f"renoise: eps shape {eps.shape} != x shape {x_prev.shape}")
    b = sched.beta_at(t)
    return kernels.scale_combine(np.sqrt(1.0 - b), x_prev, np.sqrt(b), eps)


def composite_step(model, x_t, t, x0_known, mask, rng, sched):
    """One denoise step that pins the observed region.

    Draws the known-region noise first and the reverse-step noise second
    (the latter only for t > 1, where the reverse step is stochastic); the
    known region comes from forward-noising the observed pixels at level t,
    the unknown region from the model's reverse step.
    """
    eps_known = sample_standard_normal(rng, x_t.shape, dtype=x_t.dtype)
    known = q_sample(x0_known, t, eps_known, sched)
    unknown = p_sample(model, x_t, t, rng, sched)
    return kernels.masked_merge(mask, known, unknown)


def repaint(model, x_occluded, mask, rng, sched, r, j):
    """Inpaint the mask=0 region of one (H, W, C) image in [-1, 1].

    Starts from pure noise, walks the resampled plan, then pastes the
    observed pixels back verbatim and clamps the synthesized region.
    """
    x_occluded = np.asarray(x_occluded, dtype=np.float32)
    if x_occluded.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {x_occluded.shape}")
    mask = check_mask(mask, x_occluded.shape[:2])
    m3 = mask[:, :, None]
    plan = build_plan(sched.T, r, j)
    x = sample_standard_normal(rng, x_occluded.shape, dtype=np.float32)
    for kind, t in plan.steps:
        if kind == "denoise":
            x = composite_step(model, x, t, x_occluded, m3, rng, sched)
        else:
            eps = sample_standard_normal(rng, x.shape, dtype=np.float32)
            x = renoise(x, t, eps, sched)
    x = np.clip(x, -1.0, 1.0)
    return kernels.masked_merge(m3, x_occluded, x)


def _stack_noise(rngs, shape, dtype):
    out = np.empty((len(rngs),) + shape, dtype=dtype)
    for i, rng in enumerate(rngs):
        out[i] = sample_standard_normal(rng, shape, dtype=dtype)
    return out


# model forward chunk for batched walks; caps activation memory, keeps
# matmuls large enough to stay efficient
_PREDICT_CHUNK = 256


def _predict_chunked(model, x, t):
    if x.shape[0] <= _PREDICT_CHUNK:
        return model.predict(x, t)
    out = np.empty_like(x)
    for start in range(0, x.shape[0], _PREDICT_CHUNK):
        stop = start + _PREDICT_CHUNK
        out[start:stop] = model.predict(x[start:stop], t)
    return out


def repaint_batch(model, xs, masks, rngs, sched, r, j):
    """Batched walk over many images sharing one plan.

    Each image draws all of its noise from its own generator in the same
    order as the single-image path, so results depend only on the per-image
    stream (up to batched-matmul rounding), and the model runs once per step
    for the whole batch.
    """
    xs = np.asarray(xs, dtype=np.float32)
    if xs.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) images, got shape {xs.shape}")
    n = xs.shape[0]
    if len(rngs) != n:
        raise ValueError(f"need one rng per image: {len(rngs)} rngs for {n} images")
    masks = np.asarray(masks)
    if masks.shape != (n,) + xs.shape[1:3]:
        raise ValueError(f"expected (N, H, W) masks, got shape {masks.shape}")
    m4 = np.stack([check_mask(m, xs.shape[1:3]) for m in masks])[:, :, :, None]
    plan = build_plan(sched.T, r, j)
    img_shape = xs.shape[1:]
    x = _stack_noise(rngs, img_shape, np.float32)
    for kind, t in plan.steps:
        if kind == "denoise":
            eps_known = _stack_noise(rngs, img_shape, np.float32)
            known = q_sample(xs, t, eps_known, sched)
            eps_hat = _predict_chunked(model, x, t)
            mean = posterior_mean(x, t, eps_hat, sched)
            if t == 1:
                unknown = mean
            else:
                z = _stack_noise(rngs, img_shape, np.float32)
                unknown = kernels.scale_combine(1.0, mean, np.sqrt(sched.beta_at(t)), z)
            x = kernels.masked_merge(m4, known, unknown)
        else:
            eps = _stack_noise(rngs, img_shape, np.float32)
            x = renoise(x, t, eps, sched)
    x = np.clip(x, -1.0, 1.0)
    return kernels.masked_merge(m4, xs, x)
