"""Latent normalizing flows for discrete sequences."""

from . import numcore  # noqa: F401  (sets float64 as the torch default dtype)

__version__ = "0.1.0"
