"""Recursive Bayesian neural networks for sequential triaxial soil response."""
__version__ = "0.1.0"
