"""Loss heads returning (scalar, gradient-w.r.t.-input)."""

import numpy as np


def softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def mse_loss(pred, target):
    """Per-sample squared-error sum, averaged over the batch (axis 0).

    Matches the noise-prediction objective: for unit-variance targets the
    loss of a zero predictor is about the per-sample element count.
    """
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    batch = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(diff.astype(np.float64) ** 2) / batch)
    dpred = (2.0 / batch) * diff
    return loss, dpred


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; logits used as-is."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected (B, M) logits, got {logits.shape}")
    batch, m = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"softmax_cross_entropy: expected {batch} labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= m:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {m})")
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    nll = logz - shifted[np.arange(batch), labels]
    loss = float(nll.mean())
    probs = softmax(logits, axis=1)
    dlogits = probs.astype(logits.dtype)
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch
    return loss, dlogits
