"""Numerical laboratory for symmetric Dirichlet forms on finite weighted graphs."""

__version__ = "0.1.0"
