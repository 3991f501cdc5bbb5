"""Frequency-routed LoRA adaptation toolkit for a toy latent video diffusion stack."""

__version__ = "0.1.0"
