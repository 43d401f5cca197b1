"""Patchless 3D sliding-window-attention entropy model for latent video."""

__version__ = "0.1.0"
