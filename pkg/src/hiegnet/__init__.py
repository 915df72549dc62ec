"""Heterogeneous tissue graphs of glomeruli and immune cells, and HIEGNet."""

__version__ = "0.1.0"
