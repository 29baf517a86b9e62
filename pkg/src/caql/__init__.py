"""Continual action-quality regression with manifold-aligned feature replay."""

__version__ = "0.1.0"
