"""Continual multi-target adaptation of a segmentation model across weather domains."""

__version__ = "0.1.0"
