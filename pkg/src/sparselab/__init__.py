"""Sparse-training lab: magnitude pruning and lottery-ticket variants on a tiny transformer."""

__version__ = "0.1.0"
