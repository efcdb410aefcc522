"""Latent-space step-level preference optimisation for diffusion models, at desk scale."""

__version__ = "0.1.0"
