"""Sparse ReLU MLP training by iterative hard thresholding on a gated sensing operator."""

__version__ = "0.1.0"
