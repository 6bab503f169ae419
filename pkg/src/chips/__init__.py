"""Curvature-preconditioned utility scoring for paired image-text pools."""

__version__ = "0.1.0"
