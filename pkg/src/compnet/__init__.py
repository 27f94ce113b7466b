"""Complementary segmentation networks (CompNet) for brain extraction.

Everything runs on a small numpy reverse-mode autodiff engine; see
:mod:`compnet.autograd` and :mod:`compnet.functional`.
"""

from .autograd import ShapeError, Tensor, backward
from .losses import Metrics, hard_metrics, loss_eq1, soft_dice
from .models import VARIANTS, ModelOutputs, NetworkConfig, build_model, count_params
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ShapeError", "Tensor", "backward",
    "Metrics", "hard_metrics", "loss_eq1", "soft_dice",
    "VARIANTS", "ModelOutputs", "NetworkConfig", "build_model", "count_params",
    "TrainConfig",
]
