"""Identity embedding and matching: a small convolutional embedder trained
with a classification head, unit-norm embeddings, per-identity gallery
prototypes, cosine scoring, and rank/verification metrics.

Ranking ties always resolve toward the lower gallery index, and the
verification threshold sweep picks the smallest threshold among equally
good ones, so every metric here is exactly reproducible.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .datasynth import MASK_KINDS, OcclusionSpec, make_mask
from .diffusion import TrainLog
from .nncore import Adam, Affine, Conv2d, Flatten, Model, ShapeError, SiLU, make_rng
from .nncore.blocks import Block
from .nncore.losses import softmax_cross_entropy

# Corruption augmentation for embedder training: random regions are
# overwritten with noise or with pixels from another training image, so the
# features learn to aggregate evidence instead of trusting every region.
# Constant fills are deliberately absent from the training distribution.
AUG_PROB = 0.35
AUG_SEVERITY = (0.15, 0.5)


def l2_normalize(v, axis=-1, eps=1e-12):
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(norm, eps)


class EmbedderModel(Block):
    """Three-conv trunk (two stride-2 stages) into a linear embedding, plus
    a classification head used only during training."""

    def __init__(self, image_shape, n_classes, embed_dim=64, seed=0, dtype=np.float32):
        super().__init__("embedder")
        rng = make_rng(seed)
        h, w, c = image_shape
        self.image_shape = (h, w, c)
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        h1, w1 = kernels.conv2d_output_hw(h, w, 3, 3, 2, 1)
        h2, w2 = kernels.conv2d_output_hw(h1, w1, 3, 3, 2, 1)
        self.trunk = Model(
            [
                Conv2d(3, 3, c, 16, rng, name="embedder.conv1"),
                SiLU("embedder.act1"),
                Conv2d(3, 3, 16, 32, rng, stride=2, name="embedder.conv2"),
                SiLU("embedder.act2"),
                Conv2d(3, 3, 32, 32, rng, stride=2, name="embedder.conv3"),
                SiLU("embedder.act3"),
                Flatten("embedder.flatten"),
                Affine(h2 * w2 * 32, embed_dim, rng, dtype=dtype, name="embedder.fc"),
            ],
            name="embedder.trunk",
        )
        self.head = Affine(embed_dim, n_classes, rng, dtype=dtype, name="embedder.head")

    def params(self):
        return self.trunk.params() + self.head.params()

    def to_dtype(self, dtype):
        self.trunk.to_dtype(dtype)
        self.head.to_dtype(dtype)

    def forward(self, x):
        """Training path: images -> class logits."""
        if x.ndim != 4 or x.shape[1:] != self.image_shape:
            raise ShapeError(
                f"block 'embedder': expected input (B, {self.image_shape}), got {x.shape}"
            )
        feat = self.trunk.forward(x)
        self._cache = True
        return self.head.forward(feat)

    def backward(self, dout):
        self._take_cache()
        dfeat = self.head.backward(dout)
        return self.trunk.backward(dfeat)

    def clear_caches(self):
        self._cache = None
        self.head._cache = None
        self.trunk._cache = None
        for blk in self.trunk.blocks:
            blk._cache = None

    def embed(self, images, batch_size=256):
        """Unit-norm embeddings for (N, H, W, C) or a single (H, W, C) image."""
        images = np.asarray(images)
        single = images.ndim == 3
        xb = images[None] if single else images
        if xb.ndim != 4 or xb.shape[1:] != self.image_shape:
            raise ShapeError(
                f"block 'embedder': expected images of shape {self.image_shape}, "
                f"got {images.shape}"
            )
        chunks = []
        for start in range(0, xb.shape[0], batch_size):
            feat = self.trunk.forward(xb[start : start + batch_size])
            chunks.append(l2_normalize(feat))
        self.clear_caches()
        out = np.concatenate(chunks, axis=0)
        return out[0] if single else out

    def zero_grad(self):
        for p in self.params():
            p.grad = np.zeros_like(p.value)


def train_embedder(images, labels, n_classes, epochs, batch_size, lr, seed,
                   model=None, embed_dim=64):
    """Fit the embedder as an identity classifier; returns (model, TrainLog)."""
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("train_embedder: expected a nonempty (N, H, W, C) image array")
    if labels.shape != (images.shape[0],):
        raise ValueError(
            f"train_embedder: {images.shape[0]} images but labels shape {labels.shape}"
        )
    if model is None:
        model = EmbedderModel(images.shape[1:], n_classes, embed_dim=embed_dim, seed=seed)
    rng = make_rng(seed)
    opt = Adam(model.params(), lr=lr)
    log = TrainLog()
    n, h, w, c = images.shape
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = images[idx].copy()
            for bi in range(batch.shape[0]):
                if rng.uniform() >= AUG_PROB:
                    continue
                kind = MASK_KINDS[rng.integers(0, len(MASK_KINDS))]
                sev = float(rng.uniform(*AUG_SEVERITY))
                spec = OcclusionSpec(kind, sev, seed=int(rng.integers(2**63)))
                hole = make_mask(spec, h, w)[:, :, None] == 0.0
                if rng.uniform() < 0.5:
                    fill = rng.uniform(-1.0, 1.0, (h, w, c)).astype(np.float32)
                else:
                    fill = images[rng.integers(0, n)]
                batch[bi][hole] = fill[hole]
            logits = model.forward(batch)
            loss, dlogits = softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"train_embedder: non-finite loss at epoch {epoch + 1}, "
                    f"batch {start // batch_size}"
                )
            model.backward(dlogits)
            opt.step()
            epoch_losses.append(loss)
        log.epoch_losses.append(float(np.mean(epoch_losses)))
    return model, log


def embed(embedder, images, batch_size=256):
    """Unit-norm feature(s) for one image or a batch (delegates to the model)."""
    return embedder.embed(images, batch_size=batch_size)


class Gallery:
    """Per-identity prototypes: unit-norm mean of each identity's enrolled
    embeddings, ordered by ascending label."""

    def __init__(self, labels, prototypes):
        self.labels = np.asarray(labels)
        self.prototypes = np.asarray(prototypes)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] != self.labels.shape[0]:
            raise ValueError("gallery labels and prototypes disagree")

    def __len__(self):
        return len(self.labels)


def build_gallery(embeddings, labels):
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ValueError("build_gallery: need one label per embedding row")
    if embeddings.shape[0] == 0:
        raise ValueError("build_gallery: empty enrollment set")
    uniq = np.unique(labels)
    protos = np.stack([embeddings[labels == u].mean(axis=0) for u in uniq])
    return Gallery(uniq, l2_normalize(protos).astype(embeddings.dtype))


def similarity(features, gallery):
    """Cosine score row(s) against every gallery prototype, in gallery order.

    Accepts a single (d,) feature or an (N, d) batch; raw features are
    normalized here, so the result is scale-invariant, and exact zero
    vectors are rejected.
    """
    f = np.asarray(features)
    single = f.ndim == 1
    fb = f[None] if single else f
    if fb.ndim != 2 or fb.shape[1] != gallery.prototypes.shape[1]:
        raise ValueError(
            f"similarity: features {f.shape} do not match "
            f"prototypes {gallery.prototypes.shape}"
        )
    norms = np.linalg.norm(fb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("similarity: zero-norm feature vector")
    out = (fb / norms) @ gallery.prototypes.T
    return out[0] if single else out


def rank_gallery(scores):
    """Gallery indices per probe, best first; ties go to the lower index."""
    scores = np.asarray(scores)
    return np.argsort(-scores, axis=-1, kind="stable")


def topk_accuracy(scores, probe_labels, gallery_labels, k):
    """Percent of probes whose true identity appears in the top k ranks."""
    scores = np.asarray(scores)
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    if scores.ndim != 2 or scores.shape != (probe_labels.shape[0], gallery_labels.shape[0]):
        raise ValueError(
            f"topk_accuracy: scores shape {scores.shape} does not match "
            f"{probe_labels.shape[0]} probes x {gallery_labels.shape[0]} gallery entries"
        )
    if not 1 <= k <= gallery_labels.shape[0]:
        raise ValueError(f"k must be in 1..{gallery_labels.shape[0]}, got {k}")
    ranked = rank_gallery(scores)[:, :k]
    hits = (gallery_labels[ranked] == probe_labels[:, None]).any(axis=1)
    return float(hits.mean() * 100.0)


def eer_and_acc(genuine_scores, impostor_scores):
    """Equal-error operating point from an exhaustive threshold sweep.

    Candidate thresholds are -inf, +inf, and midpoints between consecutive
    distinct scores; accepts are scores >= threshold.  Picks the threshold
    minimizing |FAR - FRR| (smallest such threshold on ties) and returns
    (eer, acc, threshold) with eer = (FAR + FRR) / 2 as a rate in [0, 1]
    and acc the percent of correctly decided trials at that same threshold.
    """
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    impostor = np.asarray(impostor_scores, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("eer_and_acc: need at least one genuine and one impostor score")
    uniq = np.unique(np.concatenate([genuine, impostor]))
    cands = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    best = None
    for tau in cands:
        far = float(np.mean(impostor >= tau))
        frr = float(np.mean(genuine < tau))
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, tau, far, frr)
    _, tau, far, frr = best
    eer = (far + frr) / 2.0
    errors = int(np.sum(impostor >= tau)) + int(np.sum(genuine < tau))
    acc = 100.0 * (1.0 - errors / (genuine.size + impostor.size))
    return eer, acc, tau


def build_verification_pairs(labels, rng, count):
    """Sample a balanced trial list over probe indices.

    Returns (idx_a, idx_b, is_genuine) with count // 2 genuine trials
    (same label, distinct indices) and the rest impostor trials,
    reproducible from the generator state.
    """
    labels = np.asarray(labels)
    if count < 2:
        raise ValueError(f"need at least 2 pairs, got {count}")
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise ValueError("need at least two identities for impostor pairs")
    multi = uniq[counts >= 2]
    if multi.size == 0:
        raise ValueError("no identity has two probes; cannot form genuine pairs")
    n_genuine = count // 2
    idx_a = np.empty(count, dtype=np.int64)
    idx_b = np.empty(count, dtype=np.int64)
    is_genuine = np.zeros(count, dtype=bool)
    for i in range(n_genuine):
        lab = multi[rng.integers(0, multi.size)]
        pool = np.flatnonzero(labels == lab)
        a, b = rng.choice(pool, size=2, replace=False)
        idx_a[i], idx_b[i], is_genuine[i] = a, b, True
    for i in range(n_genuine, count):
        la, lb = rng.choice(uniq, size=2, replace=False)
        a = rng.choice(np.flatnonzero(labels == la))
        b = rng.choice(np.flatnonzero(labels == lb))
        idx_a[i], idx_b[i] = a, b
    return idx_a, idx_b, is_genuine


@dataclass
class EvalReport:
    """One evaluation outcome: rank metrics (percent), verification EER
    (rate) and accuracy at the EER threshold (percent), plus trial counts."""

    top1: float
    top5: float
    eer: float
    acc: float
    probes: int
    gallery_size: int

    def __post_init__(self):
        if self.top1 > self.top5 + 1e-9:
            raise ValueError(f"top1 {self.top1} exceeds top5 {self.top5}")
        if not 0.0 <= self.eer <= 1.0:
            raise ValueError(f"eer {self.eer} outside [0, 1]")

    def csv_fields(self):
        return (
            f"{self.top1:.4f}",
            f"{self.top5:.4f}",
            f"{self.eer:.6f}",
            f"{self.acc:.4f}",
            str(self.probes),
            str(self.gallery_size),
        )


REPORT_HEADER = "method,n_experts,occlusion,top1,top5,eer,acc,probes,gallery_size"


def report_csv_row(method, n_experts, occlusion, report):
    return ",".join((method, str(n_experts), occlusion) + report.csv_fields())
