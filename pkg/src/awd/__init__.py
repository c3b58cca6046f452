"""Sequence-VAE toolkit with adversarial word dropout."""

__version__ = "0.1.0"
