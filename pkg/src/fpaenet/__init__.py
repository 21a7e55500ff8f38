"""Lesion detector with a feature pyramid attention enhancement neck, built on a small numpy autodiff core."""
from ._kernels import backend_name
from .config import ModelConfig, load as load_config
from .model import Detector, predict, total_loss
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Detector", "ModelConfig", "Tensor", "backend_name", "load_config", "predict", "total_loss"]
