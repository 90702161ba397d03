"""Dataset directory layout, JSON-lines manifests, and feature encoding.

On-disk layout is <root>/<split>/<class_name>/<sample_id>.evt1 (CSV streams
use .csv). Labels are assigned by sorted class-directory name, so they are
stable across filesystems and reruns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, synthetic_encode
from .events import EventStream, parse_stream, write_stream
from .frames import WindowingConfig, convert, frame_to_png, write_frames
from .train import FeatureSample

STREAM_FORMATS = {".evt1": "evt1", ".csv": "csv"}


@dataclass(frozen=True)
class DatasetItem:
    path: Path
    split: str
    class_name: str
    sample_id: str
    label: int | None  # None for loose (unlabeled) files under the split


def list_classes(root: Path, split: str) -> list[str]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise ValueError(f"missing split directory {split_dir}")
    return sorted(p.name for p in split_dir.iterdir() if p.is_dir())


def scan_dataset(root, split: str,
                 classes: list[str] | None = None
                 ) -> tuple[list[str], list[DatasetItem]]:
    """List stream files under root/split, labeled by sorted class name.

    Pass `classes` to pin the label order (e.g. the training split's) when
    scanning a split that might miss classes. Stream files sitting directly
    in the split directory are returned unlabeled (label None).
    """
    root = Path(root)
    classes = classes if classes is not None else list_classes(root, split)
    labels = {name: i for i, name in enumerate(classes)}
    items = []
    for entry in sorted((root / split).iterdir()):
        if entry.is_dir():
            if entry.name not in labels:
                raise ValueError(f"class {entry.name!r} not in class list")
            for path in sorted(entry.iterdir()):
                if path.suffix in STREAM_FORMATS:
                    items.append(DatasetItem(path, split, entry.name,
                                             path.stem, labels[entry.name]))
        elif entry.suffix in STREAM_FORMATS:
            items.append(DatasetItem(entry, split, "", entry.stem, None))
    return classes, items


def load_stream(item: DatasetItem) -> EventStream:
    return parse_stream(item.path.read_bytes(),
                        STREAM_FORMATS[item.path.suffix],
                        label=item.label, sample_id=item.sample_id)


def write_dataset(streams, root, split: str,
                  class_names: dict[int, str] | None = None) -> list[Path]:
    """Write labeled streams as EVT1 files in the standard layout."""
    root = Path(root)
    paths = []
    for s in streams:
        if s.label is None or not s.sample_id:
            raise ValueError("streams need labels and sample ids")
        name = (class_names[s.label] if class_names
                else f"class_{s.label:03d}")
        class_dir = root / split / name
        class_dir.mkdir(parents=True, exist_ok=True)
        path = class_dir / f"{s.sample_id}.evt1"
        path.write_bytes(write_stream(s))
        paths.append(path)
    return paths


def manifest_line(item: DatasetItem, m: int, n: int) -> str:
    return json.dumps({"id": item.sample_id, "label": item.label,
                       "class": item.class_name, "split": item.split,
                       "m": m, "n": n}, sort_keys=True)


def read_manifest(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def export_frames(items, out_dir, cfg: WindowingConfig | None = None,
                  colormap: str = "gray", image_format: str = "png") -> str:
    """Convert each item to frames under <out>/<split>/<class>/<id>/.

    PNG output writes frame_<i>.png per window; frm1 packs all of a sample's
    frames into frames.frm1. Returns the JSON-lines manifest text.
    """
    if image_format not in ("png", "frm1"):
        raise ValueError(f"unknown image format {image_format!r}")
    cfg = cfg or WindowingConfig()
    out_dir = Path(out_dir)
    lines = []
    for item in items:
        frames = convert(load_stream(item), cfg, colormap)
        sample_dir = out_dir / item.split / item.class_name / item.sample_id
        sample_dir.mkdir(parents=True, exist_ok=True)
        if image_format == "png":
            for i, f in enumerate(frames):
                (sample_dir / f"frame_{i}.png").write_bytes(
                    frame_to_png(f.rgb))
        else:
            (sample_dir / "frames.frm1").write_bytes(write_frames(frames))
        lines.append(manifest_line(item, len(frames), cfg.n))
    return "".join(line + "\n" for line in lines)


def encode_stream(stream: EventStream, dim: int, seed: int,
                  cfg: WindowingConfig | None = None) -> np.ndarray:
    """Per-window synthetic-encoder features, one row per frame."""
    frames = convert(stream, cfg or WindowingConfig())
    if not frames:
        raise ValueError(f"no events to encode in {stream.sample_id!r}")
    return np.stack([synthetic_encode(f, dim, seed) for f in frames])


def feature_samples(items, dim: int, seed: int,
                    cfg: WindowingConfig | None = None) -> list[FeatureSample]:
    return [FeatureSample(it.sample_id, it.label,
                          encode_stream(load_stream(it), dim, seed, cfg))
            for it in items]


def sample_embeddings(items, dim: int, seed: int,
                      cfg: WindowingConfig | None = None,
                      logit_scale: float = 100.0) -> EmbeddingSet:
    """Encode items into one EMB1-ready set, ids "<sample_id>/<window>"."""
    ids, rows = [], []
    for it in items:
        feats = encode_stream(load_stream(it), dim, seed, cfg)
        for i, row in enumerate(feats):
            ids.append(f"{it.sample_id}/{i}")
            rows.append(row)
    if not rows:
        raise ValueError("no samples to encode")
    return EmbeddingSet(ids, np.stack(rows).astype(np.float32),
                        logit_scale=logit_scale, normalized=True)


def group_embeddings(es: EmbeddingSet) -> dict[str, np.ndarray]:
    """Group "<sample>/<idx>" rows into per-sample (M, D) matrices.

    Rows are ordered by window index regardless of file order; duplicate or
    malformed ids are errors.
    """
    by_sample: dict[str, dict[int, np.ndarray]] = {}
    for sid, row in zip(es.ids, es.vectors):
        sample, sep, idx = sid.rpartition("/")
        if not sep or not idx.isdigit():
            raise ValueError(f"embedding id {sid!r} is not <sample>/<index>")
        windows = by_sample.setdefault(sample, {})
        if int(idx) in windows:
            raise ValueError(f"duplicate embedding id {sid!r}")
        windows[int(idx)] = np.asarray(row, dtype=np.float64)
    return {sample: np.stack([w[i] for i in sorted(w)])
            for sample, w in by_sample.items()}
