"""Token-aware low-rank adapters on a miniature latent-diffusion surrogate."""

__version__ = "0.1.0"
