"""Modular graph contrastive learning: samplers, encoders, discriminators, estimators."""

__version__ = "0.1.0"
