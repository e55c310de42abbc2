"""Hessian-based generalization measures and robust fine-tuning for small feedforward networks."""

from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    CorruptPayloadError,
    DataError,
    DimensionError,
    HessfineError,
    NumericError,
    SingularMatrixError,
    SingularNetworkError,
    VersionMismatchError,
)
from .net import ActivationKind, Checkpoint, LossKind, LossSpec, Network, forward, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ActivationKind",
    "CapacityError",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "CorruptPayloadError",
    "DataError",
    "DimensionError",
    "HessfineError",
    "LossKind",
    "LossSpec",
    "Network",
    "NumericError",
    "SingularMatrixError",
    "SingularNetworkError",
    "VersionMismatchError",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]
