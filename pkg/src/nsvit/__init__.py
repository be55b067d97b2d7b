"""Nullspace analysis and nullspace-noise fine-tuning for small vision transformers."""

__version__ = "0.1.0"
