"""Tiny module system: parameter registry, train/eval mode, common layers."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import Tensor


class Buffer:
    """Non-trainable persistent state (e.g. batch-norm running stats)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=np.float32)


class Module:
    """Base class; children/parameters are discovered by attribute walk."""

    def __init__(self):
        self.training = True

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Buffer):
                yield prefix + name, val
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters(prefix)}
        state.update({n: b.data for n, b in self.named_buffers(prefix)})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for n, p in self.named_parameters(prefix):
            if n not in state:
                raise KeyError(f"missing parameter {n!r} in checkpoint")
            if state[n].shape != p.data.shape:
                raise ShapeError(f"parameter {n!r}: checkpoint shape {state[n].shape} "
                                 f"!= model shape {p.data.shape}")
            p.data = state[n].astype(p.data.dtype).copy()
        for n, b in self.named_buffers(prefix):
            if n not in state:
                raise KeyError(f"missing buffer {n!r} in checkpoint")
            b.data[...] = state[n].astype(b.data.dtype)

    def set_training(self, mode: bool) -> None:
        self.training = mode
        for _, child in self._children():
            child.set_training(mode)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


class Conv2d(Module):
    """Square-kernel conv; padding defaults to 'same' for stride 1."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None,
                 pad_mode: str = "zero", zero_init: bool = False,
                 init_gain: float = 1.0):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.pad_mode = pad_mode
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=np.float32)
        else:
            std = init_gain * float(np.sqrt(2.0 / (cin * k * k)))
            w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.pad_mode == "replicate" and self.padding > 0:
            x = ops.replicate_pad2d(x, self.padding)
            return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=0)
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((fout, fin), dtype=np.float32)
        else:
            std = float(np.sqrt(2.0 / fin))
            w = rng.normal(0.0, std, size=(fout, fin)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(fout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class BatchNorm2d(Module):
    """Parameter-free batch norm with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.running_mean = Buffer(np.zeros(channels, dtype=np.float32))
        self.running_var = Buffer(np.ones(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.running_mean.data, self.running_var.data,
                              training=self.training, momentum=self.momentum, eps=self.eps)
