"""Dual-branch multi-scale Mamba UNet for small-organ CT segmentation, on numpy."""

from .model import DBMSMUNet, ModelConfig
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["DBMSMUNet", "ModelConfig", "Tensor", "no_grad", "__version__"]
