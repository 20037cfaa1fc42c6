"""Spatio-temporal sequence descriptors for visual place recognition."""

__version__ = "0.1.0"
