"""Toy-scale temporal bidirectional image/report generation.

A single autoregressive transformer with causal linear attention is trained
on synthetic longitudinal image/report pairs and serves both directions:
report-from-images and image-from-report(+prior scan).
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
