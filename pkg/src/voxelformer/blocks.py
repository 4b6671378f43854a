"""Encoder transformer blocks: low-rank token FFN with a depthwise spatial
branch, stochastic depth, and the regular/shifted two-block stage wiring."""

from typing import Optional, Tuple

import numpy as np

from . import functional as F
from .attention import WindowSelfAttention
from .ghost import PatchEmbed3d, tokens_to_volume, volume_to_tokens
from .nn import DepthwiseConv3d, LayerNorm, Linear, Module
from .tensor import Tensor

Grid = Tuple[int, int, int]


def mixffn_rank(width: int) -> int:
    return max(width // 2, 64)


def mixffn_param_count(width: int) -> int:
    r = mixffn_rank(width)
    return 2 * width * r + 27 * r


def dense_mlp_param_count(width: int) -> int:
    return 8 * width * width


class MixFFN3d(Module):
    """Low-rank feed-forward with volumetric mixing in the bottleneck.

    h = SiLU(x W_in); output = (h + DWConv3x3x3(h)) W_out, with the depthwise
    convolution applied on the token grid. Rank is max(width/2, 64), so the
    layer holds 2*d*r + 27*r parameters instead of the dense 8*d^2.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.width = width
        self.rank = mixffn_rank(width)
        self.w_in = Linear(width, self.rank, rng, dtype=dtype)
        self.spatial = DepthwiseConv3d(self.rank, 3, rng, stride=1, padding=1, dtype=dtype)
        self.w_out = Linear(self.rank, width, rng, dtype=dtype)

    def param_count(self) -> int:
        return mixffn_param_count(self.width)

    def forward(self, tokens: Tensor, grid: Grid) -> Tensor:
        b, n, _ = tokens.shape
        if n != grid[0] * grid[1] * grid[2]:
            raise ValueError(f"token count {n} does not match grid {grid}")
        h = F.silu(self.w_in(tokens))
        local = volume_to_tokens(self.spatial(tokens_to_volume(h, grid)))[0]
        return self.w_out(h + local)


class DenseMlp(Module):
    """Ablation baseline: bias-free 4x expansion FFN (8*d^2 parameters)."""

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.width = width
        self.w_in = Linear(width, 4 * width, rng, dtype=dtype)
        self.w_out = Linear(4 * width, width, rng, dtype=dtype)

    def param_count(self) -> int:
        return dense_mlp_param_count(self.width)

    def forward(self, tokens: Tensor, grid: Grid) -> Tensor:
        return self.w_out(F.silu(self.w_in(tokens)))


def drop_path(x: Tensor, p: float, training: bool,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Stochastic depth on a residual branch.

    Per sample: kept with probability 1-p and rescaled by 1/(1-p), else
    zeroed, so the expectation equals x. Identity in eval mode or at p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop_path probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng")
    keep = (rng.random(x.shape[0]) >= p).astype(x.data.dtype)
    scale = keep / (1.0 - p)
    return x * Tensor(scale.reshape((x.shape[0],) + (1,) * (x.ndim - 1)))


def drop_path_schedule(p_max: float, total_blocks: int):
    """Linear ramp: block i of L gets p_max * i / (L - 1)."""
    if total_blocks == 1:
        return [0.0]
    return [p_max * i / (total_blocks - 1) for i in range(total_blocks)]


class TransformerBlock(Module):
    """Pre-norm residual block: LN -> W-MSA -> residual, LN -> FFN -> residual,
    with DropPath on both residual branches during training."""

    def __init__(self, channels: int, heads: int, window: Grid, shifted: bool,
                 drop_prob: float, rng: np.random.Generator,
                 ffn: str = "mixffn", dtype=np.float32):
        super().__init__()
        self.shifted = shifted
        self.drop_prob = drop_prob
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.attn = WindowSelfAttention(channels, heads, window, rng, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype=dtype)
        if ffn == "mixffn":
            self.ffn = MixFFN3d(channels, rng, dtype=dtype)
        elif ffn == "dense":
            self.ffn = DenseMlp(channels, rng, dtype=dtype)
        else:
            raise ValueError(f"unknown ffn variant {ffn!r}")

    def forward(self, tokens: Tensor, grid: Grid,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        b, n, c = tokens.shape
        d, h, w = grid
        vol = self.norm1(tokens).reshape(b, d, h, w, c)
        branch = self.attn(vol, self.shifted).reshape(b, n, c)
        tokens = tokens + drop_path(branch, self.drop_prob, self.training, rng)
        branch = self.ffn(self.norm2(tokens), grid)
        return tokens + drop_path(branch, self.drop_prob, self.training, rng)


class EncoderStage(Module):
    """Patch embedding followed by a regular-window then shifted-window block."""

    def __init__(self, c_in: int, c_out: int, heads: int, window: Grid,
                 drop_probs: Tuple[float, float], rng: np.random.Generator,
                 ghost_ratio: int = 2, use_ghost: bool = True,
                 ffn: str = "mixffn", dtype=np.float32):
        super().__init__()
        self.embed = PatchEmbed3d(c_in, c_out, rng, kernel=3, stride=2, padding=1,
                                  ratio=ghost_ratio, use_ghost=use_ghost, dtype=dtype)
        self.block1 = TransformerBlock(c_out, heads, window, False, drop_probs[0],
                                       rng, ffn=ffn, dtype=dtype)
        self.block2 = TransformerBlock(c_out, heads, window, True, drop_probs[1],
                                       rng, ffn=ffn, dtype=dtype)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        tokens, grid = self.embed(x)
        tokens = self.block1(tokens, grid, rng)
        tokens = self.block2(tokens, grid, rng)
        return tokens_to_volume(tokens, grid)
