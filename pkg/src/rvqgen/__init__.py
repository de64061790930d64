"""Residual-vector-quantized masked-diffusion generative modeling, desk scale."""

__version__ = "0.1.0"
