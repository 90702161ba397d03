"""Manifest-driven embedding export.

The input is the frame manifest the primary tool writes next to its exported
images: one JSON object per line with at least "id", "split", "class", and
"m" (the frame count), with frames at <manifest dir>/<split>/<class>/<id>/
frame_<i>.png. Image rows come out one per frame in manifest order with ids
"<sample_id>/<frame_index>"; text rows come out one per class in class-list
order. Both files carry the encoder checkpoint's logit scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from .emb1 import emb1_bytes
from .encoders import load_encoder

DEFAULT_TEMPLATE = "a point cloud image of a [CLASS]"
_PLACEHOLDER = "[CLASS]"


@dataclass(frozen=True)
class ExportJob:
    manifest: Path
    image_out: Path | None = None
    text_out: Path | None = None
    classes: tuple[str, ...] = ()
    template: str = DEFAULT_TEMPLATE
    checkpoint: str = "hashproj-512"
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "manifest", Path(self.manifest))
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.template.count(_PLACEHOLDER) != 1:
            raise ValueError("template must contain exactly one [CLASS]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def read_manifest_rows(path: Path) -> list[dict]:
    """Parse the JSONL manifest and enforce unique sample ids."""
    rows = [json.loads(line) for line in
            Path(path).read_text().splitlines() if line.strip()]
    seen = set()
    for row in rows:
        if row["id"] in seen:
            raise ValueError(f"duplicate manifest id {row['id']!r}")
        seen.add(row["id"])
    return rows


def _frame_paths(manifest: Path, row: dict) -> list[Path]:
    base = Path(manifest).parent / row["split"]
    if row.get("class"):
        base = base / row["class"]
    sample_dir = base / row["id"]
    return [sample_dir / f"frame_{i}.png" for i in range(int(row["m"]))]


def _load_image(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from None


def _batched(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def export_image_embeddings(job: ExportJob) -> int:
    """Encode every frame in manifest order; returns the row count."""
    if job.image_out is None:
        raise ValueError("image_out not set")
    encoder = load_encoder(job.checkpoint)
    ids, paths = [], []
    for row in read_manifest_rows(job.manifest):
        for i, path in enumerate(_frame_paths(job.manifest, row)):
            ids.append(f"{row['id']}/{i}")
            paths.append(path)
    if len(set(ids)) != len(ids):
        raise ValueError("id collision in image export")
    rows = []
    for chunk in _batched(paths, job.batch_size):
        rows.extend(encoder.encode_images([_load_image(p) for p in chunk]))
    Path(job.image_out).write_bytes(
        emb1_bytes(ids, rows, encoder.logit_scale))
    return len(ids)


def export_text_embeddings(job: ExportJob) -> int:
    """Encode one prompt per class, preserving class-list order."""
    if job.text_out is None:
        raise ValueError("text_out not set")
    if not job.classes:
        raise ValueError("class list must be non-empty")
    encoder = load_encoder(job.checkpoint)
    prompts = [job.template.replace(_PLACEHOLDER, c) for c in job.classes]
    rows = encoder.encode_texts(prompts)
    Path(job.text_out).write_bytes(
        emb1_bytes(list(job.classes), rows, encoder.logit_scale))
    return len(job.classes)
