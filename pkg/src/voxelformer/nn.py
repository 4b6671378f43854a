"""Minimal module system: parameter registration, naming, train/eval mode.

Layers hold Parameters as attributes; ``named_parameters`` walks attributes
in insertion order, so construction order fixes parameter order everywhere
(checkpoints, optimizers, counting).
"""

from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}{key}", value)
        for key, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Symmetric uniform fan-in scaling: U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """y = x @ w (+ b) over the trailing axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = False, dtype=np.float32):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if channels % groups != 0:
            raise ValueError(f"GroupNorm: channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class Conv3d(Module):
    """Bias-free convolution (normalization layers provide the affine terms)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            uniform_init(rng, (c_out, c_in, kernel, kernel, kernel), c_in * kernel ** 3, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.stride, self.padding)


class DepthwiseConv3d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            uniform_init(rng, (channels, 1, kernel, kernel, kernel), kernel ** 3, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv3d(x, self.weight, self.stride, self.padding)


def assign_parameter_names(module: Module, prefix: str = "") -> None:
    """Stamp dotted-path names onto Parameters and reject duplicates."""
    seen = {}
    for name, p in module.named_parameters(prefix=prefix):
        if name in seen and seen[name] is not p:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen[name] = p
        p.name = name
