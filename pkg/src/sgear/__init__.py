"""Semantically-guided action anticipation: autodiff core, data formats,
encoders, temporal aggregation, prototype attention, causal decoding,
prototype losses, training and evaluation."""

from .autodiff import Tensor, grad_check
from .errors import (ConfigError, DataError, EvalError, FormatError,
                     NumericError, SgearError, ShapeError)
from .model import TABLE3_SETTINGS, ModelConfig, SgearModel, Toggles
from .semantic import LossWeights, ProtoStore
from .trainer import TrainConfig, fit, load_checkpoint, make_preset, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad_check",
    "SgearError", "ShapeError", "ConfigError", "FormatError", "DataError",
    "NumericError", "EvalError",
    "ModelConfig", "SgearModel", "Toggles", "TABLE3_SETTINGS",
    "ProtoStore", "LossWeights",
    "TrainConfig", "make_preset", "fit", "save_checkpoint", "load_checkpoint",
    "__version__",
]
