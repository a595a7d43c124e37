"""Refractive-error regression from fundus images with an attention ResNet."""

__version__ = "0.1.0"
