"""Invasive-carcinoma detection on multi-resolution slide images."""

__version__ = "0.1.0"
