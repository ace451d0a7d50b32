"""Spiking neural networks whose plasticity rules are trained by gradient descent."""

__version__ = "0.1.0"
