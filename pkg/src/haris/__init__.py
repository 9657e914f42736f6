"""Desk-scale referring image segmentation with two-pass human-like attention."""

__version__ = "0.1.0"
