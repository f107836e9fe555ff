"""Latent constriction autoencoders for one-class video anomaly detection."""

__version__ = "0.1.0"
