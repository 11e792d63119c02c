"""Latent-space face swapping with a VAE-GAN.

Submodules are imported on demand; ``import fsnet`` stays cheap so worker
processes for dataset preparation do not pay for torch.
"""

__version__ = "0.1.0"
