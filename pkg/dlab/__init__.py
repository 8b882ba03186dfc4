"""Desk-scale disentanglement lab: discrete and Gaussian VAEs on a numpy autodiff core."""

__version__ = "0.1.0"
