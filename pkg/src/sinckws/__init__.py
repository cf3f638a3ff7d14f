"""Keyword spotting on raw audio with a learnable sinc filterbank and (grouped)
depthwise-separable convolutions."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import CLASSES, KWSModel, ModelConfig, build_model, count_macs, count_parameters, default_config
from .tensor import NonFiniteError, Tape, Tensor, backward

__all__ = [
    "CLASSES", "CheckpointError", "KWSModel", "ModelConfig", "NonFiniteError", "Tape", "Tensor",
    "backward", "build_model", "count_macs", "count_parameters", "default_config",
    "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
