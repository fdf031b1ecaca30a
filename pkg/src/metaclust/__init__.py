"""Robust graph clustering with meta-learned node-pair loss weights."""

__version__ = "0.1.0"
