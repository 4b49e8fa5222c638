"""Segmentation-guided multi-view prototype classifier."""

__version__ = "0.1.0"
