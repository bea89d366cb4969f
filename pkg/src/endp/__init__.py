"""Ensemble density propagation for Bayesian CNNs."""

__version__ = "0.1.0"
