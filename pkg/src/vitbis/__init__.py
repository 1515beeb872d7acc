"""Vision-transformer 2D segmentation on a small numpy autodiff engine."""

from ._kernels import backend
from .config import ModelConfig
from .data import AugmentConfig, SyntheticSpec, generate_dataset
from .losses import LossConfig, segmentation_loss
from .metrics import MetricReport, dice_score, evaluate, hd95
from .model import VitbisModel, forward
from .optim import AdamState, OptimConfig, adam_step
from .tensor import Tensor, no_grad
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AugmentConfig",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "OptimConfig",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "VitbisModel",
    "adam_step",
    "backend",
    "dice_score",
    "evaluate",
    "forward",
    "generate_dataset",
    "hd95",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "segmentation_loss",
    "train",
]
