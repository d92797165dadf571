"""Corpus construction and evaluation toolkit for agricultural pest and
disease instruction data."""

__version__ = "0.1.0"
