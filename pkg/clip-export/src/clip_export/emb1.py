"""EMB1 serialization, the file contract this tool produces.

Layout, all little-endian: magic "EMB1", u32 version (1), u32 dim, u32 row
count, f32 logit_scale, u8 normalized flag; then one (u16 byte length,
utf-8 bytes) record per row id; then the f32 matrix row-major. Consumers
renormalize rows whose L2 norm is off unit by more than 1e-3 and count the
repairs, so a conforming writer emits unit rows and the flag set.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sIIIfB")


def emb1_bytes(ids, vectors, logit_scale: float,
               normalized: bool = True) -> bytes:
    """Serialize rows to EMB1. Pure, so re-exports are byte-identical."""
    ids = list(ids)
    vecs = np.ascontiguousarray(vectors, dtype="<f4")
    if vecs.ndim != 2:
        raise ValueError("vectors must be a 2-d R x D matrix")
    if vecs.shape[0] != len(ids):
        raise ValueError("row count does not match id count")
    if not np.isfinite(vecs).all():
        raise ValueError("non-finite embedding value")
    if not logit_scale > 0:
        raise ValueError("logit_scale must be positive")
    r, d = vecs.shape
    parts = [_HEADER.pack(MAGIC, 1, d, r, float(logit_scale),
                          1 if normalized else 0)]
    for sid in ids:
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long: {sid[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(vecs.tobytes())
    return b"".join(parts)
