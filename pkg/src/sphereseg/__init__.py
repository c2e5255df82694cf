"""Rotation-robust local attention on icosphere meshes."""

__version__ = "0.1.0"
