"""Rank-driven learning and evaluation of discrete dynamic Bayesian networks."""

__version__ = "0.1.0"
