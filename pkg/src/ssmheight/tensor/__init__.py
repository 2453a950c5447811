from . import ops
from .bmt import load as load_bmt, save as save_bmt
from .gradcheck import check_directional, check_gradients, fd_gradient_oracle, relative_error
from .tensor import ShapeError, Tensor, as_tensor, grad_enabled, no_grad, tape

__all__ = [
    "Tensor", "ShapeError", "as_tensor", "no_grad", "grad_enabled", "tape", "ops",
    "fd_gradient_oracle", "check_gradients", "check_directional", "relative_error",
    "load_bmt", "save_bmt",
]
