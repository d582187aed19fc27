"""Operator Ito calculus and Monte Carlo tools for reaction-diffusion systems."""

__version__ = "0.1.0"
