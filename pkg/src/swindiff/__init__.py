"""Conditional 3D diffusion for MR-to-CT synthesis with a Swin-Vnet denoiser."""

__version__ = "0.1.0"
