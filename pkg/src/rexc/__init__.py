"""Self-rationalizing classification with latent rationales, generative
knowledge expansion and latent knowledge selection."""

__version__ = "0.1.0"
