"""Disentangled VAE for average dose-response estimation with continuous treatments."""

__version__ = "0.1.0"
