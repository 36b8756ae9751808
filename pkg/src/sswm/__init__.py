"""Hierarchical latent-imagination RL on resettable diagonal state-space world models."""

__version__ = "0.1.0"
