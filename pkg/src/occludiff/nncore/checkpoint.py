"""Binary weight container.

Layout: magic ``MODW``, version u16 LE, then repeated records of
{name-length u16 LE, UTF-8 name, rank u8, dims u32 LE each, raw float32 LE
row-major data} until end of file.  Round-trips are bit-exact for float32.
"""

import struct

import numpy as np

MAGIC = b"MODW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params):
    """Write named tensors; accepts ParamBlocks or (name, array) pairs."""
    items = []
    for p in params:
        if hasattr(p, "name") and hasattr(p, "value"):
            items.append((p.name, p.value))
        else:
            items.append((p[0], p[1]))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        for name, value in items:
            raw = np.ascontiguousarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", raw.ndim))
            for dim in raw.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(raw.tobytes(order="C"))


def load_checkpoint(path):
    """Read the container back into an ordered {name: float32 array} dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    offset = 6
    while offset < len(blob):
        if offset + 2 > len(blob):
            raise CheckpointError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 1 > len(blob):
            raise CheckpointError(f"{path}: truncated rank for '{name}'")
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        if offset + 4 * rank > len(blob):
            raise CheckpointError(f"{path}: truncated dims for '{name}'")
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated data for '{name}'")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
        offset += nbytes
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter '{name}'")
        out[name] = data.copy()
    return out


def assign_params(params, loaded):
    """Copy loaded arrays into ParamBlocks by name; the two name sets and
    every shape must match exactly."""
    by_name = {p.name: p for p in params}
    missing = [n for n in by_name if n not in loaded]
    extra = [n for n in loaded if n not in by_name]
    if missing or extra:
        raise CheckpointError(
            f"parameter name mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, p in by_name.items():
        arr = loaded[name]
        if arr.shape != p.value.shape:
            raise CheckpointError(f"'{name}': shape {arr.shape} != expected {p.value.shape}")
        p.value = arr.astype(p.value.dtype)
        p.grad = np.zeros_like(p.value)
