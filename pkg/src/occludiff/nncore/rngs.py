"""Seeded randomness.

All randomness in the pipeline flows from one root seed.  Stage streams are
derived by hashing the stage name into the root: ``derive_seed(root, name)``
is the first 8 bytes (little-endian) of SHA-256 over the root seed packed as
u64-LE followed by the UTF-8 stage name.  The derivation is documented here
because reports and checkpoints must be byte-reproducible from (root seed,
config) alone.
"""

import hashlib
import struct

import numpy as np


def derive_seed(root_seed, stage):
    """Derive a child seed for a named stage from the root seed."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", int(root_seed) & 0xFFFFFFFFFFFFFFFF))
    h.update(stage.encode("utf-8"))
    return struct.unpack("<Q", h.digest()[:8])[0]


def make_rng(seed):
    """Counter-based generator: same seed + same call order => same stream."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def sample_standard_normal(rng, shape, dtype=np.float32):
    """I.i.d. N(0,1) draws with the requested dtype."""
    if isinstance(shape, int):
        shape = (shape,)
    if len(shape) == 0:
        raise ValueError("sample_standard_normal: shape must be nonempty")
    return rng.standard_normal(shape, dtype=dtype)
