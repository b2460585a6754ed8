"""Surrogate-accelerated compliance optimization of graded lattice structures."""

__version__ = "0.1.0"
