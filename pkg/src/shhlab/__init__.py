"""Numerical lab for practical stochastic stabilization under sample-and-hold control."""
__version__ = "0.1.0"
