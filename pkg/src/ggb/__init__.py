"""Pose-conditioned image synthesis with per-level generative guiding blocks.

Everything runs on the small numpy autodiff engine in :mod:`ggb.tensor`.
"""
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "__version__"]
