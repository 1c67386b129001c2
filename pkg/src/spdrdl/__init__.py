"""Sonar-style target recognition with a learned despeckling front end,
structural-similarity and target-shift priors, built on a small numpy
autograd engine."""

from . import data, evaluate, layers, losses, model, tensor, train
from .errors import SpdrdlError
from .model import ModelConfig, ModelParams
from .tensor import Tensor, no_grad
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "data", "evaluate", "layers", "losses", "model", "tensor", "train",
    "ModelConfig", "ModelParams", "SpdrdlError", "Tensor", "TrainConfig", "no_grad",
]
