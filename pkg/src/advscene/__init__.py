"""Adversarial driving-scenario generation with guided latent diffusion."""

__version__ = "0.1.0"
