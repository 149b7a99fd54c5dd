"""Numerical laboratory for diffusion, optimal control and score matching on Gaussian ground truth."""

__version__ = "0.1.0"
