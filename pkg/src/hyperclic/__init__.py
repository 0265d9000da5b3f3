"""Hyperbolic continual learning of instances and classes."""

__version__ = "0.1.0"
