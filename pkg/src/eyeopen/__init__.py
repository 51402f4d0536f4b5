"""Weakly-supervised degree-of-eye-openness estimation with a small MFM CNN."""

__version__ = "0.1.0"
