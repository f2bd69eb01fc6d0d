"""Bayesian reconstruction of past population from settlement counts."""

__version__ = "0.1.0"
