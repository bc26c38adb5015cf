"""Masking speech enhancement with text-aligned training."""

__version__ = "0.1.0"
