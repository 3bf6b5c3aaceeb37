"""Verify classifier predictions by scoring (input, predicted label) pairs under a conditional VAE."""

__version__ = "0.1.0"
