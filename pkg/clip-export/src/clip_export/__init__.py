"""Run a vision-language encoder over exported frames and write EMB1 files."""

from .emb1 import emb1_bytes
from .encoders import HashProjEncoder, load_encoder
from .export import (
    DEFAULT_TEMPLATE,
    ExportJob,
    export_image_embeddings,
    export_text_embeddings,
)

__all__ = [
    "DEFAULT_TEMPLATE",
    "ExportJob",
    "HashProjEncoder",
    "emb1_bytes",
    "export_image_embeddings",
    "export_text_embeddings",
    "load_encoder",
]
