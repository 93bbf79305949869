"""Weakly-supervised attribute recognition and localization toolkit."""

__version__ = "0.1.0"

from .layers import PyramidSpec, fspp_bin_count, fspp_bins, fspp_forward
from .model import ModelConfig, build, default_config, forward, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import TrainConfig, cross_entropy, positive_proportions, train, weighted_cross_entropy

__all__ = [
    "__version__",
    "PyramidSpec",
    "fspp_bin_count",
    "fspp_bins",
    "fspp_forward",
    "ModelConfig",
    "build",
    "default_config",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "Tensor",
    "TrainConfig",
    "cross_entropy",
    "positive_proportions",
    "train",
    "weighted_cross_entropy",
]
