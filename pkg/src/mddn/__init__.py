"""Distortion-aware deformable super-resolution for equirectangular panoramas."""

__version__ = "0.1.0"
