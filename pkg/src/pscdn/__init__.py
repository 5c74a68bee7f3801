"""Convolutional autoencoder feedback compression of quantized IRS phase shifts."""

__version__ = "0.1.0"
