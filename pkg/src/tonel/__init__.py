"""Task-oriented, noise-resilient quantized embeddings for CiM retrieval."""

__version__ = "0.1.0"
