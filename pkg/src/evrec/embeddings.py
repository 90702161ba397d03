"""Embedding file contract (EMB1), prompt construction, synthetic encoders.

The frozen encoder lives outside this package; embeddings cross the boundary
as EMB1 files. A deterministic linear synthetic encoder stands in for it on
the oriented-bar benchmark so classification behavior is testable end to end.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .events import BAR_HALF_WIDTH, bar_direction
from .frames import EventFrame, Histogram2, normalize

EMB1_MAGIC = b"EMB1"
_EMB1_HEADER = struct.Struct("<4sIIIfB")

# Canonical geometry shared by synthetic_encode and the class prototypes.
POOL_SIDE = 16
PROTO_SIDE = 64

DEFAULT_TEMPLATE_TEXT = "a point cloud image of a [CLASS]"
_PLACEHOLDER = "[CLASS]"


@dataclass(frozen=True)
class PromptTemplate:
    template: str

    def __post_init__(self):
        if self.template.count(_PLACEHOLDER) != 1:
            raise ValueError("template must contain exactly one [CLASS]")

    def fill(self, class_name: str) -> str:
        return self.template.replace(_PLACEHOLDER, class_name)


DEFAULT_TEMPLATE = PromptTemplate(DEFAULT_TEMPLATE_TEXT)


def build_prompts(classes, tpl: PromptTemplate = DEFAULT_TEMPLATE) -> list[str]:
    """Substitute each class name into the template, order preserved."""
    if isinstance(tpl, str):
        tpl = PromptTemplate(tpl)
    classes = list(classes)
    if not classes:
        raise ValueError("class list must be non-empty")
    return [tpl.fill(c) for c in classes]


@dataclass
class EmbeddingSet:
    """R embedding rows with ids, stored f32; classification math uses f64.

    logit_scale is the softmax temperature's reciprocal and travels with the
    file because it is checkpoint-dependent. `corrections` counts rows the
    reader had to renormalize (0 for a conforming exporter).
    """

    ids: list[str]
    vectors: np.ndarray
    logit_scale: float = 100.0
    normalized: bool = False
    corrections: int = 0

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("vectors must be a 2-d R x D matrix")
        if v.shape[0] != len(self.ids):
            raise ValueError("row count does not match id count")
        bad = np.where(~np.isfinite(v).all(axis=1))[0]
        if bad.size:
            raise ValueError(f"non-finite value in row {int(bad[0])}")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        if self.normalized and v.shape[1]:
            norms = np.linalg.norm(v.astype(np.float64), axis=1)
            off = np.where(np.abs(norms - 1.0) > 1e-3)[0]
            if off.size:
                raise ValueError(
                    f"row {int(off[0])} marked normalized but has norm {norms[off[0]]:.6g}")
        v.setflags(write=False)
        self.vectors = v
        self.ids = list(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def write_embeddings(es: EmbeddingSet, sink) -> None:
    """Write EMB1: header, id records, then the f32 matrix row-major."""
    r, d = es.vectors.shape
    sink.write(_EMB1_HEADER.pack(EMB1_MAGIC, 1, d, r, float(es.logit_scale),
                                 1 if es.normalized else 0))
    for sid in es.ids:
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long: {sid[:32]!r}...")
        sink.write(struct.pack("<H", len(raw)) + raw)
    sink.write(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())


def read_embeddings(source) -> EmbeddingSet:
    """Read EMB1 and return a normalized set.

    Rows whose L2 norm deviates from 1 by more than 1e-3 are renormalized and
    counted in `corrections`. Unit-norm inputs round-trip bit-exactly.
    """
    data = source if isinstance(source, bytes) else source.read()
    buf = io.BytesIO(data)
    head = buf.read(_EMB1_HEADER.size)
    if len(head) < _EMB1_HEADER.size:
        raise ValueError("truncated EMB1 header")
    magic, version, d, r, logit_scale, norm_flag = _EMB1_HEADER.unpack(head)
    if magic != EMB1_MAGIC:
        raise ValueError("bad EMB1 magic")
    if version != 1:
        raise ValueError(f"unsupported EMB1 version {version}")
    ids = []
    for i in range(r):
        lraw = buf.read(2)
        if len(lraw) < 2:
            raise ValueError(f"truncated id record {i}")
        (ln,) = struct.unpack("<H", lraw)
        raw = buf.read(ln)
        if len(raw) < ln:
            raise ValueError(f"truncated id record {i}")
        ids.append(raw.decode("utf-8"))
    mat = buf.read()
    if len(mat) != r * d * 4:
        raise ValueError(f"matrix payload is {len(mat)} bytes, expected {r * d * 4}")
    vectors = np.frombuffer(mat, dtype="<f4").reshape(r, d).copy()
    bad = np.where(~np.isfinite(vectors).all(axis=1))[0]
    if bad.size:
        raise ValueError(f"non-finite value in row {int(bad[0])}")
    corrections = 0
    if d:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0) > 1e-3
        if np.any(off):
            zero = np.where(norms == 0.0)[0]
            if zero.size:
                raise ValueError(f"zero-norm row {int(zero[0])} cannot be normalized")
            fixed = vectors[off].astype(np.float64)
            vectors[off] = (fixed / norms[off][:, None]).astype(np.float32)
            corrections = int(off.sum())
    return EmbeddingSet(ids, vectors, logit_scale=float(logit_scale),
                        normalized=True, corrections=corrections)


@lru_cache(maxsize=32)
def _projection(seed: int, dim: int) -> np.ndarray:
    p = np.random.default_rng(seed).standard_normal((POOL_SIDE * POOL_SIDE, dim))
    p.setflags(write=False)
    return p


@lru_cache(maxsize=64)
def _area_weights(src: int, dst: int) -> np.ndarray:
    """Exact area-overlap averaging weights, shape (dst, src), rows sum to 1."""
    w = np.zeros((dst, src))
    step = src / dst
    for d in range(dst):
        lo, hi = d * step, (d + 1) * step
        for s in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            w[d, s] = min(hi, s + 1) - max(lo, s)
    w /= step
    w.setflags(write=False)
    return w


def _pool_grid(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    return _area_weights(h, POOL_SIDE) @ grid @ _area_weights(w, POOL_SIDE).T


def _encode_grid(grid: np.ndarray, dim: int, seed: int) -> np.ndarray:
    v = _pool_grid(grid).ravel() @ _projection(seed, dim)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v = _projection(seed, dim)[0]
        norm = np.linalg.norm(v)
    return v / norm


def synthetic_encode(frame: EventFrame, dim: int, seed: int) -> np.ndarray:
    """Deterministic linear stand-in for the frozen image encoder.

    Pools the frame's normalized histogram sum (pn+nn) to a 16x16 grid by
    exact area averaging, applies a fixed seeded 256 x dim projection, and
    L2-normalizes. Linearity makes synthetic zero-shot behavior predictable.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    pn, nn = normalize(frame.histogram)
    return _encode_grid(pn + nn, dim, seed)


def class_prototype_grid(class_index: int, num_classes: int,
                         side: int = PROTO_SIDE) -> np.ndarray:
    """Indicator grid of the canonical noise-free bar for one class.

    Marks pixels whose center lies within BAR_HALF_WIDTH of the class line
    through the sensor center, i.e. the idealized support of gen_synthetic's
    signal events before rounding.
    """
    if not 0 <= class_index < num_classes:
        raise ValueError("class_index out of range")
    dx, dy = bar_direction(class_index, num_classes)
    cx, cy = side // 2, side // 2
    xs = np.arange(side)[None, :] - cx
    ys = np.arange(side)[:, None] - cy
    dist = np.abs(-xs * dy + ys * dx)
    return (dist <= BAR_HALF_WIDTH).astype(np.float64)


def synthetic_text_encode(class_index: int, num_classes: int, dim: int,
                          seed: int) -> np.ndarray:
    """Encode the canonical class prototype with the same projection.

    Shares geometry and projection with synthetic_encode so text and image
    vectors of the same class align by construction.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    return _encode_grid(class_prototype_grid(class_index, num_classes), dim, seed)


def synthetic_text_set(num_classes: int, dim: int, seed: int,
                       logit_scale: float = 100.0) -> EmbeddingSet:
    """Class-prototype embeddings as an EmbeddingSet (f32, unit rows)."""
    rows = np.stack([synthetic_text_encode(c, num_classes, dim, seed)
                     for c in range(num_classes)])
    return EmbeddingSet([f"class_{c:03d}" for c in range(num_classes)],
                        rows.astype(np.float32), logit_scale=logit_scale,
                        normalized=True)
