"""Encoder adapters behind one interface: encode_images / encode_texts.

Checkpoint identifiers:

- "hashproj-<dim>": a deterministic offline encoder that needs no model
  weights. Images go through a fixed resize / center-crop / area-pool /
  random-projection pipeline; texts are hashed bags of token vectors. It has
  no semantics worth trusting, but it is fast, dependency-light, and
  byte-deterministic, which is what exporter plumbing tests need.
- "open-clip:<arch>:<pretrained>": a real pretrained encoder through the
  optional open_clip dependency. Its own preprocessing pipeline is applied;
  the checkpoint's logit scale is carried into the output files.

Both produce unit-normalized float32 rows.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@lru_cache(maxsize=8)
def _image_projection(pooled: int, dim: int) -> np.ndarray:
    p = np.random.default_rng(7).standard_normal((pooled, dim))
    p.setflags(write=False)
    return p


@lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8],
                          "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    v.setflags(write=False)
    return v


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("encoder produced a zero embedding")
    return (mat / norms).astype(np.float32)


@dataclass(frozen=True)
class HashProjEncoder:
    """Weight-free stand-in encoder with a CLIP-shaped preprocessing path."""

    dim: int
    logit_scale: float = 100.0
    image_size: int = 224
    pool_side: int = 16

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.image_size % self.pool_side != 0:
            raise ValueError("image_size must be a multiple of pool_side")

    def preprocess(self, image: Image.Image) -> np.ndarray:
        """RGB, shorter side to image_size, center crop, floats in [0, 1]."""
        img = image.convert("RGB")
        side = self.image_size
        scale = side / min(img.size)
        resized = img.resize((max(side, round(img.width * scale)),
                              max(side, round(img.height * scale))),
                             Image.BILINEAR)
        left = (resized.width - side) // 2
        top = (resized.height - side) // 2
        crop = resized.crop((left, top, left + side, top + side))
        return np.asarray(crop, dtype=np.float64) / 255.0

    def encode_images(self, images) -> np.ndarray:
        images = list(images)
        if not images:
            raise ValueError("no images to encode")
        block = self.image_size // self.pool_side
        rows = []
        for img in images:
            arr = self.preprocess(img)
            pooled = arr.reshape(self.pool_side, block,
                                 self.pool_side, block, 3).mean(axis=(1, 3))
            rows.append(pooled.ravel())
        flat = np.stack(rows)
        proj = _image_projection(flat.shape[1], self.dim)
        return _unit_rows(flat @ proj)

    def encode_texts(self, texts) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("no texts to encode")
        rows = []
        for text in texts:
            tokens = _TOKEN_RE.findall(text.lower())
            if not tokens:
                raise ValueError(f"cannot tokenize {text!r}")
            rows.append(np.sum([_token_vector(t, self.dim) for t in tokens],
                               axis=0))
        return _unit_rows(np.stack(rows))


class OpenClipEncoder:
    """Thin adapter over an open_clip model; all math stays in the model."""

    def __init__(self, arch: str, pretrained: str):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise ValueError(
                "open-clip checkpoints need the optional dependencies: "
                "pip install 'clip-export[real]'") from exc
        self._torch = torch
        model, _, preprocess = open_clip.create_model_and_transforms(
            arch, pretrained=pretrained)
        model.eval()
        self._model = model
        self._preprocess = preprocess
        self._tokenizer = open_clip.get_tokenizer(arch)
        self.logit_scale = float(model.logit_scale.exp().item())

    def encode_images(self, images) -> np.ndarray:
        batch = self._torch.stack([self._preprocess(img.convert("RGB"))
                                   for img in images])
        with self._torch.no_grad():
            feats = self._model.encode_image(batch)
        return _unit_rows(feats.cpu().numpy().astype(np.float64))

    def encode_texts(self, texts) -> np.ndarray:
        tokens = self._tokenizer(list(texts))
        with self._torch.no_grad():
            feats = self._model.encode_text(tokens)
        return _unit_rows(feats.cpu().numpy().astype(np.float64))


def load_encoder(checkpoint: str):
    """Resolve a checkpoint identifier to an encoder instance."""
    if checkpoint.startswith("hashproj-"):
        suffix = checkpoint[len("hashproj-"):]
        if not suffix.isdigit() or int(suffix) < 1:
            raise ValueError(f"bad hashproj dimension in {checkpoint!r}")
        return HashProjEncoder(int(suffix))
    if checkpoint.startswith("open-clip:"):
        parts = checkpoint.split(":")
        if len(parts) != 3 or not all(parts[1:]):
            raise ValueError(
                f"expected open-clip:<arch>:<pretrained>, got {checkpoint!r}")
        return OpenClipEncoder(parts[1], parts[2])
    raise ValueError(f"unknown encoder checkpoint {checkpoint!r}")
