"""Sequential Bayesian optimal experimental design with a latent attention surrogate."""

__version__ = "0.1.0"
