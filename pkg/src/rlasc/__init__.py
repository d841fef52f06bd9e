"""Semantic image coding with learned per-concept bit allocation."""

__version__ = "0.1.0"
