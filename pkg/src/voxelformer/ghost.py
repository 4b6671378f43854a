"""Ghost convolution and the tokenizing patch-embedding stage.

A ghost convolution computes floor(c_out / ratio) "primary" channels with a
regular convolution and synthesizes the remaining channels with cheap 3x3x3
depthwise convolutions of the primary maps, cutting parameters roughly by
the ratio. The embedding stage stacks ghost conv -> depthwise positional
conv -> LayerNorm and flattens the volume into a token sequence.
"""

from typing import Tuple

import numpy as np

from . import functional as F
from .nn import DepthwiseConv3d, LayerNorm, Module, Parameter, uniform_init
from .tensor import Tensor, concat


def ghost_param_count(c_in: int, c_out: int, kernel: int, ratio: int) -> int:
    """Exact parameter count of a ghost convolution layer."""
    c_primary = c_out // ratio
    if c_primary < 1:
        raise ValueError(f"ghost ratio {ratio} leaves no primary channels for c_out={c_out}")
    c_ghost = c_out - c_primary
    return c_in * c_primary * kernel ** 3 + c_ghost * 27


def standard_param_count(c_in: int, c_out: int, kernel: int) -> int:
    return c_in * c_out * kernel ** 3


class GhostConv3d(Module):
    """Primary convolution plus depthwise-synthesized ghost channels.

    Ghost channel j is a stride-1, padding-1 depthwise 3x3x3 convolution of
    primary channel (j mod c_primary); with ratio 2 the mapping is
    one-to-one. The ghost kernel is fixed at 3x3x3 regardless of the primary
    kernel. ratio 1 degenerates to a standard convolution.
    """

    GHOST_KERNEL = 3

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, ratio: int = 2, dtype=np.float32):
        super().__init__()
        if ratio < 1:
            raise ValueError(f"ghost ratio must be >= 1, got {ratio}")
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.ratio = ratio
        self.c_primary = c_out // ratio
        if self.c_primary < 1:
            raise ValueError(
                f"ghost ratio {ratio} leaves no primary channels for c_out={c_out}")
        self.c_ghost = c_out - self.c_primary
        self.primary = Parameter(uniform_init(
            rng, (self.c_primary, c_in, kernel, kernel, kernel), c_in * kernel ** 3, dtype))
        if self.c_ghost > 0:
            k = self.GHOST_KERNEL
            self.ghost = Parameter(uniform_init(
                rng, (self.c_ghost, 1, k, k, k), k ** 3, dtype))
        else:
            self.ghost = None

    def param_count(self) -> int:
        return ghost_param_count(self.c_in, self.c_out, self.kernel, self.ratio)

    def _ghost_source(self, primary: Tensor) -> Tensor:
        """Primary channels cycled to line up with the ghost filters."""
        if self.c_ghost <= self.c_primary:
            return primary[:, : self.c_ghost]
        pieces = [primary] * (self.c_ghost // self.c_primary)
        rem = self.c_ghost % self.c_primary
        if rem:
            pieces.append(primary[:, :rem])
        return concat(pieces, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        primary = F.conv3d(x, self.primary, self.stride, self.padding)
        if self.c_ghost == 0:
            return primary
        ghost = F.depthwise_conv3d(self._ghost_source(primary), self.ghost, stride=1, padding=1)
        return concat([primary, ghost], axis=1)


class PatchEmbed3d(Module):
    """Downsampling tokenizer: ghost conv -> positional depthwise conv -> LayerNorm.

    Returns tokens of shape (B, N, c_out) with N = D' * H' * W'; token i maps
    to voxel (i // (H' * W'), (i // W') % H', i % W') in row-major D-H-W
    order, so flatten/unflatten is a bijection.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 2, padding: int = 1,
                 ratio: int = 2, use_ghost: bool = True, dtype=np.float32):
        super().__init__()
        self.c_out = c_out
        if use_ghost:
            self.conv = GhostConv3d(c_in, c_out, kernel, rng, stride, padding, ratio, dtype)
        else:
            from .nn import Conv3d
            self.conv = Conv3d(c_in, c_out, kernel, rng, stride, padding, dtype)
        self.pos = DepthwiseConv3d(c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm = LayerNorm(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tuple[int, int, int]]:
        feat = self.conv(x)
        feat = self.pos(feat)
        b, c, d, h, w = feat.shape
        tokens = feat.permute(0, 2, 3, 4, 1).reshape(b, d * h * w, c)
        return self.norm(tokens), (d, h, w)


def tokens_to_volume(tokens: Tensor, grid: Tuple[int, int, int]) -> Tensor:
    """(B, N, C) -> (B, C, D, H, W) for row-major D-H-W token order."""
    b, n, c = tokens.shape
    d, h, w = grid
    if n != d * h * w:
        raise ValueError(f"token count {n} does not match grid {grid}")
    return tokens.reshape(b, d, h, w, c).permute(0, 4, 1, 2, 3)


def volume_to_tokens(x: Tensor) -> Tuple[Tensor, Tuple[int, int, int]]:
    """(B, C, D, H, W) -> (B, N, C); inverse of tokens_to_volume."""
    b, c, d, h, w = x.shape
    return x.permute(0, 2, 3, 4, 1).reshape(b, d * h * w, c), (d, h, w)
