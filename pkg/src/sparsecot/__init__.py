"""Sparsemax-attention encoder-decoder with a latent chain-of-thought module,
plus attention cost accounting."""

__version__ = "0.1.0"
