"""Hyperspherical prototype embeddings for distance-based OOD detection."""

__version__ = "0.1.0"
