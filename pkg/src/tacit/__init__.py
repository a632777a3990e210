"""Rectified-flow maze solving with a pixel-space diffusion transformer."""

__version__ = "0.1.0"
