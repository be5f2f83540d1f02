"""Procedural identity corpus, occlusion synthesis, and the dataset container.

Identities are seeded superpositions of low-frequency 2-D cosines plus a
few soft elliptical bumps; per-image variation is a small integer shift,
an amplitude jitter, and additive noise, all scaled by the variation knob
(zero variation means bit-identical images).  Masks are binary (H, W)
grids with 1 = observed, 0 = occluded, and every generator is a pure
function of its spec and seed.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .nncore import derive_seed, make_rng

MAGIC = b"MODE"
VERSION = 1

MASK_KINDS = ("rect_mask", "random_loss", "lines", "leaves")


class ContainerError(ValueError):
    """Malformed dataset container file."""


@dataclass
class Dataset:
    """In-memory corpus: float32 images (N, H, W, C) in [-1, 1] and integer
    labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.images.shape[0]} images but labels shape {self.labels.shape}"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class IdentitySpec:
    """Seeded signature: cosine components (rows [fx, fy, phase, amp]) and
    soft bumps (rows [cy, cx, ry, rx, amp]), plus the variation scale."""

    label: int
    components: np.ndarray
    blobs: np.ndarray
    variation: float


def make_identity_spec(label, root_seed, variation=1.0):
    rng = make_rng(derive_seed(root_seed, f"identity-{label}"))
    n_comp = int(rng.integers(2, 5))
    comps = np.empty((n_comp, 4))
    for i in range(n_comp):
        fx, fy = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        while fx == 0 and fy == 0:
            fx, fy = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        comps[i] = (fx, fy, rng.uniform(0.0, 2.0 * np.pi), rng.uniform(0.5, 1.0))
    n_blob = int(rng.integers(2, 4))
    blobs = np.empty((n_blob, 5))
    for i in range(n_blob):
        amp = rng.uniform(0.4, 1.0) * (1.0 if rng.uniform() < 0.5 else -1.0)
        blobs[i] = (rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85),
                    rng.uniform(0.08, 0.2), rng.uniform(0.08, 0.2), amp)
    return IdentitySpec(label=int(label), components=comps, blobs=blobs,
                        variation=float(variation))


def render_signature(spec, h, w):
    """Deterministic clean image for an identity, peak amplitude 0.85."""
    yy = np.arange(h)[:, None] / h
    xx = np.arange(w)[None, :] / w
    canvas = np.zeros((h, w))
    for fx, fy, phase, amp in spec.components:
        canvas += amp * np.cos(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    for cy, cx, ry, rx, amp in spec.blobs:
        d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        canvas += amp * np.exp(-0.5 * d2)
    peak = np.abs(canvas).max()
    if peak > 0:
        canvas *= 0.85 / peak
    return canvas


def _render_image(base, variation, rng):
    v = float(variation)
    dy = int(np.round(v * rng.uniform(-2.5, 2.5)))
    dx = int(np.round(v * rng.uniform(-2.5, 2.5)))
    scale = 1.0 + 0.1 * v * rng.uniform(-1.0, 1.0)
    noise = 0.05 * v * rng.standard_normal(base.shape)
    img = np.roll(base, (dy, dx), axis=(0, 1)) * scale + noise
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_dataset(n_identities, images_per_identity, h, w, seed, variation=1.0):
    """Seeded corpus of n_identities x images_per_identity grayscale images."""
    if n_identities < 2:
        raise ValueError(f"need at least 2 identities, got {n_identities}")
    if images_per_identity < 1:
        raise ValueError(f"need at least 1 image per identity, got {images_per_identity}")
    if h < 8 or w < 8:
        raise ValueError(f"image grid too small: {h}x{w} (minimum 8x8)")
    specs = [make_identity_spec(lab, seed, variation) for lab in range(n_identities)]
    bases = np.stack([render_signature(s, h, w) for s in specs])
    flat = bases.reshape(n_identities, -1)
    # distinct-signature guarantee is probabilistic; surface a collision loudly
    for i in range(n_identities):
        d = np.abs(flat[i + 1 :] - flat[i]).max(axis=1) if i + 1 < n_identities else None
        if d is not None and d.size and d.min() < 1e-3:
            j = i + 1 + int(d.argmin())
            raise RuntimeError(f"identity signatures {i} and {j} collide; change the seed")
    n_total = n_identities * images_per_identity
    images = np.empty((n_total, h, w, 1), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    pos = 0
    for spec, base in zip(specs, bases):
        for i in range(images_per_identity):
            rng = make_rng(derive_seed(seed, f"image-{spec.label}-{i}"))
            images[pos, :, :, 0] = _render_image(base, spec.variation, rng)
            labels[pos] = spec.label
            pos += 1
    return Dataset(images, labels)


@dataclass(frozen=True)
class OcclusionSpec:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown occlusion kind {self.kind!r}; expected {MASK_KINDS}")
        if not 0.0 < self.severity <= 1.0:
            raise ValueError(f"severity must be in (0, 1], got {self.severity}")


def make_mask(spec, h, w):
    """Binary (H, W) mask for the spec; 0 marks occluded pixels.

    rect_mask: the bottom rows (height fraction = severity).
    random_loss: uniformly sampled pixels, exact count round(severity*H*W).
    lines: evenly spaced full-width occluded rows, round(severity*H) of them.
    leaves: union of random soft ellipses, trimmed outside-in to the exact
    target pixel count.
    """
    if not isinstance(spec, OcclusionSpec):
        spec = OcclusionSpec(**spec) if isinstance(spec, dict) else spec
    if h < 1 or w < 1:
        raise ValueError(f"degenerate mask grid {h}x{w}")
    mask = np.ones((h, w), dtype=np.float32)
    rng = make_rng(derive_seed(spec.seed, f"mask/{spec.kind}/{h}x{w}"))
    if spec.kind == "rect_mask":
        rows = max(1, int(np.round(spec.severity * h)))
        mask[h - rows :, :] = 0.0
    elif spec.kind == "random_loss":
        target = max(1, int(np.round(spec.severity * h * w)))
        idx = rng.choice(h * w, size=target, replace=False)
        mask.ravel()[idx] = 0.0
    elif spec.kind == "lines":
        rows = max(1, int(np.round(spec.severity * h)))
        idx = np.floor(np.arange(rows) * (h / rows)).astype(int)
        mask[idx, :] = 0.0
    else:  # leaves
        target = max(1, int(np.round(spec.severity * h * w)))
        yy = np.arange(h)[:, None]
        xx = np.arange(w)[None, :]
        field = np.full((h, w), np.inf)
        for _ in range(10000):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ry = rng.uniform(0.08, 0.25) * h
            rx = rng.uniform(0.08, 0.25) * w
            d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
            np.minimum(field, d2, out=field)
            if int((field <= 1.0).sum()) >= target:
                break
        order = np.argsort(field.ravel(), kind="stable")[:target]
        mask.ravel()[order] = 0.0
    return mask


def occlude(image, mask, fill=0.0):
    """mask=1 pixels kept, mask=0 pixels set to fill; image (..., H, W, C)."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim < 3 or mask.shape != image.shape[-3:-1]:
        raise ValueError(
            f"occlude: mask shape {mask.shape} does not match image shape {image.shape}"
        )
    m = mask.astype(image.dtype)[..., None]
    return (image * m + fill * (1.0 - m)).astype(image.dtype)


def split_indices(labels, gallery_fraction, seed):
    """Disjoint per-identity index split; every identity lands in both parts."""
    labels = np.asarray(labels)
    if not 0.0 < gallery_fraction < 1.0:
        raise ValueError(f"gallery fraction must be in (0, 1), got {gallery_fraction}")
    rng = make_rng(derive_seed(seed, "split"))
    gal, probe = [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if idx.size < 2:
            raise ValueError(f"identity {lab} has {idx.size} image(s); need at least 2")
        n_gal = int(np.clip(np.round(gallery_fraction * idx.size), 1, idx.size - 1))
        perm = rng.permutation(idx)
        gal.append(np.sort(perm[:n_gal]))
        probe.append(np.sort(perm[n_gal:]))
    return np.concatenate(gal), np.concatenate(probe)


def split(dataset, gallery_fraction, seed):
    """(gallery, probe) Dataset pair; disjoint, union = dataset."""
    gal_idx, probe_idx = split_indices(dataset.labels, gallery_fraction, seed)
    return dataset.subset(gal_idx), dataset.subset(probe_idx)


def save_container(path, dataset):
    """Write the binary corpus container (also used for mask stacks)."""
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    labels = np.asarray(dataset.labels)
    n, h, w, c = images.shape
    if h > 0xFFFF or w > 0xFFFF or c > 0xFFFF:
        raise ContainerError(f"dims {h}x{w}x{c} exceed the u16 header range")
    if not np.all(np.isfinite(images)) or images.min() < -1.0 or images.max() > 1.0:
        raise ContainerError("pixels must be finite and within [-1, 1]")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFFFFFF:
        raise ContainerError("labels must fit in u32")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIHHH", VERSION, n, h, w, c))
        for i in range(n):
            fh.write(struct.pack("<I", int(labels[i])))
            fh.write(images[i].tobytes(order="C"))


def load_container(path):
    """Read a container back; header counts must match the payload exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 16:
        raise ContainerError(f"{path}: truncated header")
    version, n, h, w, c = struct.unpack_from("<HIHHH", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    per_image = 4 + 4 * h * w * c
    expected = 16 + n * per_image
    if len(blob) != expected:
        raise ContainerError(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    images = np.empty((n, h, w, c), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    offset = 16
    for i in range(n):
        (labels[i],) = struct.unpack_from("<I", blob, offset)
        images[i] = np.frombuffer(
            blob, dtype="<f4", count=h * w * c, offset=offset + 4
        ).reshape(h, w, c)
        offset += per_image
    return Dataset(images, labels)


def write_png(path, image):
    """Export one (H, W, C) image in [-1, 1] as an 8-bit PNG."""
    from PIL import Image

    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {image.shape}")
    u8 = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        Image.fromarray(u8[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(u8, mode="RGB").save(path)
