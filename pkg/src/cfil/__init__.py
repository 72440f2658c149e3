"""Kinship verification with cross-pair feature interaction learning.

A small numpy autograd core, the non-local and local weighted operations,
the two-branch network, a seeded synthetic data protocol, Adam training
with checkpoints, and verification metrics.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    IncompatibleError,
    InputError,
    NumericError,
)
from .network import CFILModel, ModelConfig
from .tensor import Tensor, no_grad
from .weighted import DistanceKernel, local_apply, nonlocal_apply

__version__ = "0.1.0"

__all__ = [
    "CFILModel",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "DistanceKernel",
    "IncompatibleError",
    "InputError",
    "ModelConfig",
    "NumericError",
    "Tensor",
    "local_apply",
    "no_grad",
    "nonlocal_apply",
]
