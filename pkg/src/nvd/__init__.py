"""Layered neural video decomposition with hypernetwork initialization."""

from .autodiff import Parameter, Tensor, set_precision, zero_grads
from .hashgrid import HashGridSpec
from .hypernet import HyperNet, HyperNetConfig
from .losses import LossWeights
from .model import ArchSpec
from .trainer import TrainConfig

__all__ = [
    "ArchSpec",
    "HashGridSpec",
    "HyperNet",
    "HyperNetConfig",
    "LossWeights",
    "Parameter",
    "Tensor",
    "TrainConfig",
    "set_precision",
    "zero_grads",
]

__version__ = "0.1.0"
