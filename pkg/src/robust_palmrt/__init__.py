"""Finite-sample permutation tests for partial association and dispersion in linear models."""

__version__ = "0.1.0"
