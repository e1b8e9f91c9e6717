from .tensor import Tensor, as_tensor
from .module import Buffer, BatchNorm2d, Conv2d, Linear, Module
from .optim import AdamW, GradCheckReport, grad_check
from .checkpoint import checkpoint_hash, fnv1a64, load_checkpoint, save_checkpoint
from . import ops

__all__ = [
    "Tensor", "as_tensor", "ops",
    "Module", "Conv2d", "Linear", "BatchNorm2d", "Buffer",
    "AdamW", "grad_check", "GradCheckReport",
    "save_checkpoint", "load_checkpoint", "checkpoint_hash", "fnv1a64",
]
