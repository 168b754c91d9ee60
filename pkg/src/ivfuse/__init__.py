"""Infrared/visible image fusion with kernel-based cross-modal alignment."""

from .config import KernelConfig, LossWeights, ModelConfig, RunConfig, TrainConfig
from .kernels import KernelSpec
from .model import FusionModel

__version__ = "0.1.0"

__all__ = [
    "FusionModel",
    "KernelConfig",
    "KernelSpec",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "__version__",
]
