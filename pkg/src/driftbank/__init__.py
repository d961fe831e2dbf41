"""Drift-corrective memory bank for autoregressive latent rollouts."""

__version__ = "0.1.0"
