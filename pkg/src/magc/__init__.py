"""Semantic-guided latent compression codec with a toy conditional diffusion decoder."""

__version__ = "0.1.0"
