"""Compact semantic segmentation network built on numpy."""

__version__ = "0.1.0"
