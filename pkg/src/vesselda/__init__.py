"""Vessel segmentation on hyperspectral cubes via unsupervised domain adaptation."""

__version__ = "0.1.0"
