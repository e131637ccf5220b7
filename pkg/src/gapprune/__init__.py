"""Pruning, PGD attacks and 8-bit quantization on a small NumPy autograd engine."""

__version__ = "0.1.0"
