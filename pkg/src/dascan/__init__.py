"""dascan: dynamic adaptive-scan state-space vision models on the CPU.

A self-contained research codebase: a small reverse-mode autodiff engine
over numpy arrays, a selective state-space sequence layer with its
convolution-kernel dual, differentiable bilinear resampling, learned
scan-order generation, a four-stage image classification backbone, and
the training/benchmark/visualization tooling around them.
"""

from .errors import (ContractError, DascanError, DomainError, FormatError,
                     NumericsError, ShapeError)
from .model import Model, ModelConfig, build_model, count_flops, count_params, preset
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DascanError",
    "DomainError",
    "FormatError",
    "Model",
    "ModelConfig",
    "NumericsError",
    "ShapeError",
    "Tensor",
    "build_model",
    "count_flops",
    "count_params",
    "no_grad",
    "preset",
    "__version__",
]
