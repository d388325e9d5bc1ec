"""Convolutional matrix factorization with an entropy-regularized activation loss."""

__version__ = "0.1.0"
