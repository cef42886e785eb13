"""Float64 arrays with reverse-mode differentiation."""

from .gradcheck import DeterminismError, GradcheckReport, gradcheck, relative_error
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all
from .tensor import (
    NEG_INF,
    ComputeTape,
    ContractError,
    DegenerateSoftmaxError,
    DimensionError,
    NonFiniteError,
    NumkitError,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
)

__all__ = [
    *_ops_all,
    "NEG_INF",
    "ComputeTape",
    "ContractError",
    "DegenerateSoftmaxError",
    "DeterminismError",
    "DimensionError",
    "GradcheckReport",
    "NonFiniteError",
    "NumkitError",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_enabled",
    "gradcheck",
    "no_grad",
    "relative_error",
]
