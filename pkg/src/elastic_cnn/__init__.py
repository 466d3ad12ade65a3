"""Elastic multi-resolution CNN blocks on a numpy autograd core."""

__version__ = "0.1.0"
