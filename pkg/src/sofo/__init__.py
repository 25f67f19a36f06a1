"""Stochastic online feedback optimization with non-compliant agents."""

__version__ = "0.1.0"
