"""Diffusion-based refinement of coarse semantic segmentations."""

__version__ = "0.1.0"
