"""Quasi-conformal registration and recognition of partial 3D face meshes."""

__version__ = "0.1.0"
