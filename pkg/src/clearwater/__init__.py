"""Differentiable underwater image formation and true-color restoration."""

__version__ = "0.1.0"
