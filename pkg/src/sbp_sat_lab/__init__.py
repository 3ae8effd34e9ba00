"""Summation-by-parts operators, SAT penalties and convergence studies for 1D diffusion."""

__version__ = "0.1.0"
