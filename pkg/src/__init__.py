"""Finite element solvers for elliptic tracking-type optimal control problems."""

__version__ = "0.1.0"
