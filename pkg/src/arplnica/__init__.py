"""Switching autoregressive Poisson log-normal ICA for temporal count data."""

__version__ = "0.1.0"
