"""Numerical laboratory for periodic homogenization of monotone p-Laplace type operators."""
__version__ = "0.1.0"
