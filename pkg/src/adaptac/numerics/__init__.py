from . import tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import finite_diff_check
from .nn import MLP, Linear, Module, mlp_forward
from .optim import Adam, AdamState, adam_step
from .tensor import ShapeError, Tensor, backward, linear, no_grad, softmax

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "Linear",
    "MLP",
    "Module",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "finite_diff_check",
    "linear",
    "load_checkpoint",
    "mlp_forward",
    "no_grad",
    "save_checkpoint",
    "softmax",
    "tensor",
]
