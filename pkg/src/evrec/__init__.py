"""Event-camera recognition with frozen vision-language embeddings."""

__version__ = "0.1.0"
