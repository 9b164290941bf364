"""Point-cloud transformer encoder aligned to frozen image/text embeddings."""

__version__ = "0.1.0"
