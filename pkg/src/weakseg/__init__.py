"""Scribble-supervised multi-class segmentation with an image-tag size prior."""

__version__ = "0.1.0"
