"""Per-window cosine-softmax classification, order-invariant aggregation,
and logit ensembling with an external classifier.

Per-window class probabilities are softmax(logit_scale * cos(w_i, f)). A
recording's windows are mean-pooled; the mean is computed over a canonically
sorted copy with pairwise summation so any window permutation produces
bit-identical output, not merely close output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSet
from .events import EventStream
from .frames import WindowingConfig, window_bounds

LGT1_MAGIC = b"LGT1"
_LGT1_HEADER = struct.Struct("<4sIQ")

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EnsembleConfig:
    """lam weights the external classifier's logits; 0 keeps ours only."""

    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax in 64-bit with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _weights(w) -> tuple[np.ndarray, float | None]:
    if isinstance(w, EmbeddingSet):
        return w.vectors.astype(np.float64), w.logit_scale
    return np.asarray(w, dtype=np.float64), None


def classify_window(f: np.ndarray, w, logit_scale: float | None = None) -> np.ndarray:
    """softmax(logit_scale * cos(w_i, f)) for one unit feature vector."""
    mat, carried = _weights(w)
    if logit_scale is None:
        logit_scale = carried if carried is not None else 100.0
    f = np.asarray(f, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValueError("need at least 2 class weight rows")
    if f.shape != (mat.shape[1],):
        raise ValueError(f"feature dim {f.shape} does not match weights {mat.shape}")
    return softmax(logit_scale * (mat @ f))


def _pairwise_sum(rows: np.ndarray) -> np.ndarray:
    n = rows.shape[0]
    if n == 1:
        return rows[0].copy()
    half = n // 2
    return _pairwise_sum(rows[:half]) + _pairwise_sum(rows[half:])


def aggregate(per_window) -> np.ndarray:
    """Mean of per-window probability vectors, bit-exact under permutation.

    Rows are sorted lexicographically and summed pairwise in a fixed
    reduction order, so the float result depends only on the multiset.
    """
    mat = np.asarray(list(per_window), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError("aggregate needs a non-empty sequence of equal-length rows")
    order = np.lexsort(mat.T[::-1])
    return _pairwise_sum(mat[order]) / mat.shape[0]


def classify_features(features: np.ndarray, w,
                      logit_scale: float | None = None) -> np.ndarray:
    """classify_window each feature row, then aggregate."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be M x D")
    return aggregate([classify_window(row, w, logit_scale) for row in features])


def predict(stream: EventStream, w, visual_features,
            cfg: WindowingConfig | None = None,
            logit_scale: float | None = None) -> tuple[int, np.ndarray]:
    """Classify a recording from its per-window features.

    visual_features rows must correspond 1:1, in order, to the stream's
    windows under cfg. Ties break toward the lowest class index.
    """
    cfg = cfg or WindowingConfig()
    feats, _ = _weights(visual_features)
    expected = len(window_bounds(len(stream), cfg))
    if feats.shape[0] != expected:
        raise ValueError(
            f"{feats.shape[0]} feature rows for {expected} windows")
    probs = classify_features(feats, w, logit_scale)
    return int(np.argmax(probs)), probs


def our_logits(probs: np.ndarray) -> np.ndarray:
    """Log of aggregated probabilities, floor-clamped before the log."""
    return np.log(np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR))


def ensemble(ours: np.ndarray, external: np.ndarray,
             cfg: EnsembleConfig | None = None) -> tuple[int, np.ndarray]:
    """(1-lam)*ours + lam*external, softmaxed; ties go to the lowest index."""
    cfg = cfg or EnsembleConfig()
    a = np.asarray(ours, dtype=np.float64)
    b = np.asarray(external, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("logit vectors must share one length")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite logits")
    combined = (1.0 - cfg.lam) * a + cfg.lam * b
    probs = softmax(combined)
    return int(np.argmax(probs)), probs


@dataclass(frozen=True)
class ExternalLogits:
    """Logit rows keyed by sample id, aligned with evaluation samples."""

    ids: list[str]
    logits: np.ndarray  # (R, K) float32

    def __post_init__(self):
        arr = np.asarray(self.logits, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] != len(self.ids):
            raise ValueError("logits must be R x K matching ids")
        if not np.isfinite(arr).all():
            raise ValueError("non-finite external logits")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)
        object.__setattr__(self, "ids", list(self.ids))

    def lookup(self, sample_id: str) -> np.ndarray:
        try:
            return self.logits[self.ids.index(sample_id)]
        except ValueError:
            raise KeyError(f"no external logits for {sample_id!r}") from None


def write_logits(ext: ExternalLogits, sink) -> None:
    r, k = ext.logits.shape
    sink.write(_LGT1_HEADER.pack(LGT1_MAGIC, k, r))
    for sid in ext.ids:
        raw = sid.encode("utf-8")
        sink.write(struct.pack("<H", len(raw)) + raw)
    sink.write(np.ascontiguousarray(ext.logits, dtype="<f4").tobytes())


def read_logits(source) -> ExternalLogits:
    data = source if isinstance(source, bytes) else source.read()
    if len(data) < _LGT1_HEADER.size:
        raise ValueError("truncated LGT1 header")
    magic, k, r = _LGT1_HEADER.unpack_from(data)
    if magic != LGT1_MAGIC:
        raise ValueError("bad LGT1 magic")
    off = _LGT1_HEADER.size
    ids = []
    for i in range(r):
        if off + 2 > len(data):
            raise ValueError(f"truncated id record {i}")
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + ln > len(data):
            raise ValueError(f"truncated id record {i}")
        ids.append(data[off:off + ln].decode("utf-8"))
        off += ln
    body = data[off:]
    if len(body) != r * k * 4:
        raise ValueError("LGT1 payload size mismatch")
    mat = np.frombuffer(body, dtype="<f4").reshape(r, k).copy()
    return ExternalLogits(ids, mat)
