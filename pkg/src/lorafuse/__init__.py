"""LoraFuse - training-free content/style LoRA fusion for a toy diffusion denoiser."""

__version__ = "0.1.0"
__author__ = "LoraFuse Team"
