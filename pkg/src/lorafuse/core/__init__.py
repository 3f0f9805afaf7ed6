"""Core numerics, model, and diffusion building blocks."""
