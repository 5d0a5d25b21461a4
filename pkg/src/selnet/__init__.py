"""Selective neural networks with an integrated reject option."""

__version__ = "0.1.0"
