"""Diffusion-based data augmentation by bottleneck perturbation, with
multi-head self-training on the synthesized data."""

__version__ = "0.1.0"
