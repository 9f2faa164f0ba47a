"""Identity-consistent fine-tuning of a desk-scale latent diffusion model with
a triplet identity loss, plus its evaluation pipeline on procedural faces."""

__version__ = "0.1.0"
