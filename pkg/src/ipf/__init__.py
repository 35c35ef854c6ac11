"""Implicit particle filters for SDEs with sparse, noisy observations."""

__version__ = "0.1.0"
