"""Intrinsic image decomposition toolkit.

Decomposes an image I into a reflectance layer R and an achromatic
shading layer S with I = R * S. Ships a small reverse-mode autodiff
engine, an encoder/two-decoder convolutional network, a differentiable
bilateral solver used as a network layer, hybrid training on synthetic
triplets plus illumination-varying image pairs, and evaluation metrics.
"""

__version__ = "0.1.0"
