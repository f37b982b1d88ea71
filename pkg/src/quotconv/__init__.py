"""Quotient-space rotation-equivariant point convolution toolkit."""

from . import autograd, checks, cli, cloud, kernel, layers, rotgroup, train

__all__ = ["autograd", "checks", "cli", "cloud", "kernel", "layers", "rotgroup", "train"]
__version__ = "0.1.0"
