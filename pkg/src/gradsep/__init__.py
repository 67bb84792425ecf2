"""Gradient inversion toolkit: blind source separation on FC-layer gradients."""

__version__ = "0.1.0"
