"""Fine-grained classification with quality-probing classifiers, a part navigator
and multi-part multi-scale cross-attention, on a small numpy autodiff core."""

from . import kernels
from .config import RunConfig
from .errors import (ConfigurationError, CsqaError, DegenerateBoxWarning, DimensionError,
                     NonFiniteError, ShortfallWarning, UsageError)
from .model import CsqaModel
from .tensor import Tensor, backward, no_grad, stop_gradient

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "CsqaError", "CsqaModel", "DegenerateBoxWarning", "DimensionError",
    "NonFiniteError", "RunConfig", "ShortfallWarning", "Tensor", "UsageError", "backward",
    "kernels", "no_grad", "stop_gradient",
]
