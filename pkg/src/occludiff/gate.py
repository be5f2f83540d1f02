"""Decision-space fusion of diffusion experts.

Stream 0 is always the un-repainted occluded input; streams 1..n are the
stochastic inpaintings.  A small gating network maps the concatenated
per-stream embeddings to a simplex weight vector, and the per-stream
gallery score rows are mixed with those weights.  Two gates are available:
plain softmax (affine logits) and noisy top-k (trainable noise magnitude,
all but the k largest logits dropped before the softmax).
"""

from dataclasses import dataclass

import numpy as np

from .diffusion import TrainLog
from .nncore import Adam, ParamBlock, make_rng, sample_standard_normal
from .nncore.blocks import _sigmoid
from .nncore.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nncore.losses import softmax, softmax_cross_entropy
from .recognition import rank_gallery

GATE_KINDS = ("softmax", "noisy_topk")


@dataclass
class GateParams:
    """Trainable gate state for n+1 streams of feature dim d.

    W_g: ((n+1)*d, n+1) logit matrix; b_g: (n+1,) bias (softmax gate only);
    W_noise: ((n+1)*d, n+1) noise-magnitude matrix and k the retain count
    (noisy top-k gate only, else None).
    """

    W_g: np.ndarray
    b_g: np.ndarray
    W_noise: np.ndarray = None
    k: int = None

    def __post_init__(self):
        e = self.b_g.shape[0]
        if self.W_g.ndim != 2 or self.W_g.shape[1] != e:
            raise ValueError(f"W_g shape {self.W_g.shape} inconsistent with {e} streams")
        if self.W_g.shape[0] % e != 0:
            raise ValueError(f"W_g rows {self.W_g.shape[0]} not divisible by {e} streams")
        if self.W_noise is not None:
            if self.W_noise.shape != self.W_g.shape:
                raise ValueError(
                    f"W_noise shape {self.W_noise.shape} != W_g shape {self.W_g.shape}"
                )
            if self.k is None or not 1 <= self.k <= e:
                raise ValueError(f"top-k retain count must be in 1..{e}, got {self.k}")

    @property
    def n_streams(self):
        return self.b_g.shape[0]

    @property
    def feature_dim(self):
        return self.W_g.shape[0] // self.n_streams


def init_gate(n_experts, feature_dim, kind="softmax", k=None, dtype=np.float32):
    """Zero-initialized gate over n_experts + 1 streams (uniform weights
    before training)."""
    if kind not in GATE_KINDS:
        raise ValueError(f"unknown gate kind {kind!r}; expected one of {GATE_KINDS}")
    e = n_experts + 1
    W_g = np.zeros((e * feature_dim, e), dtype=dtype)
    b_g = np.zeros(e, dtype=dtype)
    if kind == "softmax":
        return GateParams(W_g=W_g, b_g=b_g)
    if k is None:
        k = e
    return GateParams(W_g=W_g, b_g=b_g, W_noise=np.zeros_like(W_g), k=int(k))


@dataclass
class ExpertBundle:
    """Per-probe evidence: stream embeddings (n+1, d) and gallery score rows
    (n+1, M); the raw images are optional and never needed for fusion."""

    features: np.ndarray
    rows: np.ndarray
    images: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.rows = np.asarray(self.rows)
        if self.features.ndim != 2 or self.rows.ndim != 2:
            raise ValueError("bundle features and rows must be 2-D (streams first)")
        if self.features.shape[0] != self.rows.shape[0]:
            raise ValueError(
                f"bundle has {self.features.shape[0]} feature streams but "
                f"{self.rows.shape[0]} score rows"
            )

    @property
    def n_streams(self):
        return self.features.shape[0]


def _concat_features(params, features):
    """Flatten per-stream features to the gate input, checking dimensions."""
    x = np.asarray(features)
    if x.ndim == 2:
        x = x.reshape(-1)
    if x.ndim != 1 or x.shape[0] != params.W_g.shape[0]:
        raise ValueError(
            f"gate expects {params.n_streams} streams of dim {params.feature_dim} "
            f"({params.W_g.shape[0]} values), got shape {np.asarray(features).shape}"
        )
    return x.astype(params.W_g.dtype)


def gate_softmax(params, features):
    """w = softmax(concat(F) @ W_g + b_g); strictly positive, sums to 1."""
    x = _concat_features(params, features)
    logits = x @ params.W_g + params.b_g
    return softmax(logits[None])[0]


def keep_topk(h, k):
    """Copy of h with everything outside the k largest entries set to -inf;
    ties keep the lower index."""
    h = np.asarray(h)
    if not 1 <= k <= h.shape[-1]:
        raise ValueError(f"top-k retain count must be in 1..{h.shape[-1]}, got {k}")
    order = np.argsort(-h, axis=-1, kind="stable")
    masked = np.full_like(h, -np.inf)
    idx = order[..., :k]
    np.put_along_axis(masked, idx, np.take_along_axis(h, idx, axis=-1), axis=-1)
    return masked


def gate_noisy_topk(params, features, noise_rng=None):
    """Sparse gate: H = x@W_g + N * softplus(x@W_noise), keep the top k
    entries, softmax the rest.  noise_rng=None means the zero noise source
    (deterministic, used at evaluation time)."""
    if params.W_noise is None:
        raise ValueError("gate has no W_noise; it was built for the softmax kind")
    x = _concat_features(params, features)
    clean = x @ params.W_g
    if noise_rng is None:
        h = clean
    else:
        n = sample_standard_normal(noise_rng, (params.n_streams,), dtype=np.float64)
        h = clean + n * _softplus(x @ params.W_noise)
    return softmax(keep_topk(h, params.k)[None])[0]


def _softplus(x):
    return np.logaddexp(0.0, x)


def mixture(rows, weights):
    """S = sum_i w_i * rows_i, elementwise over the gallery axis."""
    rows = np.asarray(rows)
    weights = np.asarray(weights)
    if rows.ndim != 2 or weights.shape != (rows.shape[0],):
        raise ValueError(
            f"mixture: {rows.shape[0] if rows.ndim == 2 else '?'} rows need as many "
            f"weights, got weights shape {weights.shape}"
        )
    return weights @ rows


def baseline_rf_average(rows):
    """Unweighted mean of all streams (the repaint-fusion ablation arm)."""
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("baseline_rf_average: need a nonempty (streams, M) row matrix")
    return rows.mean(axis=0)


def identify(bundle, params, gallery, noise_rng=None):
    """Gallery labels ranked by the gated mixture score, best first."""
    if bundle.n_streams != params.n_streams:
        raise ValueError(
            f"bundle has {bundle.n_streams} streams but gate expects {params.n_streams}"
        )
    if bundle.rows.shape[1] != len(gallery):
        raise ValueError(
            f"bundle rows cover {bundle.rows.shape[1]} identities, gallery has {len(gallery)}"
        )
    if params.W_noise is not None:
        w = gate_noisy_topk(params, bundle.features, noise_rng)
    else:
        w = gate_softmax(params, bundle.features)
    s = mixture(bundle.rows, w)
    return gallery.labels[rank_gallery(s)]


def gate_loss(mixed_rows, target_idx, logit_scale=1.0):
    """Cross-entropy with the mixed score rows used directly as logits
    (optionally rescaled); mean over the batch."""
    mixed_rows = np.asarray(mixed_rows)
    if mixed_rows.ndim != 2:
        raise ValueError(f"expected (B, M) score rows, got shape {mixed_rows.shape}")
    loss, _ = softmax_cross_entropy(mixed_rows * logit_scale, np.asarray(target_idx))
    return loss


def _stack_bundles(bundles):
    features = np.stack([np.asarray(b.features, dtype=np.float64) for b in bundles])
    rows = np.stack([np.asarray(b.rows, dtype=np.float64) for b in bundles])
    return features, rows


def _gate_batch_forward(params, x, rows, noise):
    """Shared forward on stacked bundles.

    x: (B, (n+1)*d); rows: (B, n+1, M); noise: (B, n+1) logit noise or None
    (evaluation, and always for the softmax kind).  Returns (w, S, pre_noise).
    """
    logits = x @ params.W_g
    pre_noise = None
    if params.W_noise is None:
        logits = logits + params.b_g
        w = softmax(logits)
    else:
        pre_noise = x @ params.W_noise
        if noise is not None:
            logits = logits + noise * _softplus(pre_noise)
        w = softmax(keep_topk(logits, params.k))
    s = np.einsum("be,bem->bm", w, rows)
    return w, s, pre_noise


def gate_step_grads(params, x, rows, target_idx, noise=None, logit_scale=1.0):
    """Loss and analytic parameter gradients for one stacked batch.

    Returns (loss, grads) with grads keyed 'W_g', 'b_g' (softmax kind) or
    'W_g', 'W_noise' (noisy top-k kind).  Dropped logits get zero gradient
    through the hard top-k mask; the noise path differentiates through the
    softplus magnitude only, the draw itself being a constant.
    """
    w, s, pre_noise = _gate_batch_forward(params, x, rows, noise)
    loss, ds = softmax_cross_entropy(s * logit_scale, np.asarray(target_idx))
    ds = ds * logit_scale
    dw = np.einsum("bm,bem->be", ds, rows)
    dlogit = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    grads = {"W_g": x.T @ dlogit}
    if params.W_noise is None:
        grads["b_g"] = dlogit.sum(axis=0)
    elif noise is None:
        grads["W_noise"] = np.zeros_like(params.W_noise)
    else:
        grads["W_noise"] = x.T @ (dlogit * (noise * _sigmoid(pre_noise)))
    return loss, grads


def mixture_batch(params, features, rows):
    """Fused (B, M) score rows for stacked bundles, zero-noise gate path.

    features: (B, n+1, d); rows: (B, n+1, M).  Agrees with the per-probe
    gate_softmax/gate_noisy_topk + mixture path up to float rounding (this
    path accumulates in 64-bit).
    """
    features = np.asarray(features, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    if features.ndim != 3 or rows.ndim != 3 or features.shape[:2] != rows.shape[:2]:
        raise ValueError(
            f"mixture_batch: features {features.shape} and rows {rows.shape} disagree"
        )
    b, e, d = features.shape
    if e != params.n_streams or d != params.feature_dim:
        raise ValueError(
            f"gate expects {params.n_streams} streams of dim {params.feature_dim}, "
            f"got {e} streams of dim {d}"
        )
    x = features.reshape(b, e * d)
    _, s, _ = _gate_batch_forward(params, x, rows, None)
    return s


def train_gate(bundles, target_idx, kind="softmax", k=None, epochs=200, batch_size=32,
               lr=1e-6, seed=0, logit_scale=1.0):
    """Fit the gate on precomputed bundles; returns (GateParams, TrainLog).

    target_idx are gallery row indices (the label's position in the gallery),
    not raw labels.  Only the gate's own parameters move; bundles are frozen
    evidence.  The noisy top-k gate draws fresh logit noise every batch
    during training and none at evaluation.
    """
    if len(bundles) == 0:
        raise ValueError("train_gate: empty bundle list")
    features, rows = _stack_bundles(bundles)
    n_probes, e, d = features.shape
    target_idx = np.asarray(target_idx)
    if target_idx.shape != (n_probes,):
        raise ValueError(f"need {n_probes} targets, got shape {target_idx.shape}")
    m = rows.shape[2]
    if target_idx.min() < 0 or target_idx.max() >= m:
        raise ValueError(f"gallery index out of range 0..{m - 1}")
    params = init_gate(e - 1, d, kind=kind, k=k, dtype=np.float64)
    x_all = features.reshape(n_probes, e * d)
    pw = ParamBlock("gate.W_g", params.W_g)
    pb = ParamBlock("gate.b_g", params.b_g)
    blocks = [pw, pb] if kind == "softmax" else [pw, ParamBlock("gate.W_noise", params.W_noise)]
    opt = Adam(blocks, lr=lr)
    rng = make_rng(seed)
    log = TrainLog()
    for epoch in range(epochs):
        order = rng.permutation(n_probes)
        epoch_losses = []
        for start in range(0, n_probes, batch_size):
            idx = order[start : start + batch_size]
            x = x_all[idx]
            noise = None
            if kind == "noisy_topk":
                noise = sample_standard_normal(rng, (x.shape[0], e), dtype=np.float64)
            loss, grads = gate_step_grads(params, x, rows[idx], target_idx[idx],
                                          noise=noise, logit_scale=logit_scale)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"train_gate: non-finite loss at epoch {epoch + 1}, "
                    f"batch {start // batch_size}"
                )
            pw.grad = grads["W_g"]
            if kind == "softmax":
                pb.grad = grads["b_g"]
            else:
                blocks[1].grad = grads["W_noise"]
            opt.step()
            epoch_losses.append(loss)
        log.epoch_losses.append(float(np.mean(epoch_losses)))
    out_dtype = np.float32
    final = GateParams(
        W_g=params.W_g.astype(out_dtype),
        b_g=params.b_g.astype(out_dtype),
        W_noise=None if params.W_noise is None else params.W_noise.astype(out_dtype),
        k=params.k,
    )
    return final, log


def save_gate(path, params):
    items = [("gate.W_g", params.W_g), ("gate.b_g", params.b_g)]
    if params.W_noise is not None:
        items.append(("gate.W_noise", params.W_noise))
    save_checkpoint(path, items)


def load_gate(path, k=None):
    loaded = load_checkpoint(path)
    for need in ("gate.W_g", "gate.b_g"):
        if need not in loaded:
            raise CheckpointError(f"{path}: missing parameter '{need}'")
    W_noise = loaded.get("gate.W_noise")
    if W_noise is not None and k is None:
        k = loaded["gate.b_g"].shape[0]
    return GateParams(W_g=loaded["gate.W_g"], b_g=loaded["gate.b_g"],
                      W_noise=W_noise, k=k)
