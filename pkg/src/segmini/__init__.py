"""Semantic segmentation with depthwise separable encoder-decoder networks on a CPU."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
