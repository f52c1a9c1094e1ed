"""Numerical toolkit for ground states of the 2D Coulomb gas."""

__version__ = "0.1.0"
