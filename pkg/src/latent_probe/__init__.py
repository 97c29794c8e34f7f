"""Desk-scale study of how pixel and VAE-latent inputs shape actor-critic policy representations."""

__version__ = "0.1.0"
