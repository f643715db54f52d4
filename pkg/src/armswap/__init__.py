"""Two-stage robot-arm swapping on synthetic desk-scale video: GAN translation then latent diffusion refinement."""

__version__ = "0.1.0"
