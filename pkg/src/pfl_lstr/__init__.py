"""Personalized federated Long Short-term Transformer for driver intention inference."""

__version__ = "0.1.0"
