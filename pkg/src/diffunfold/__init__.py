"""Diffusion-model posterior sampling with a deep-unfolded conditional denoiser."""

__version__ = "0.1.0"
