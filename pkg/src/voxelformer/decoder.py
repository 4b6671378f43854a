"""Decoder stages: cross-attention skip fusion, channel recalibration, and
the skip-free final upsampling block.

A fusion stage upsamples decoder features 2x, projects the encoder skip to
the decoder width, runs windowed cross-attention (decoder tokens query,
projected skip tokens provide keys and values), then recalibrates channels
with a squeeze-excitation gate and refines spatially with a ghost
convolution + GroupNorm + SiLU.
"""

from typing import Tuple

import numpy as np

from . import functional as F
from .attention import (Grid, build_shift_mask, padded_grid, window_attention,
                        window_partition, window_reverse)
from .ghost import GhostConv3d
from .nn import Conv3d, GroupNorm, Linear, Module
from .tensor import Tensor, concat, pad


def groupnorm_groups(channels: int) -> int:
    """8 groups, or one group per channel for very narrow maps."""
    return 8 if channels >= 8 else channels


class SqueezeExcite(Module):
    """Channel gating: global average pool -> bottleneck MLP -> sigmoid gates.

    Gates lie in (0, 1), so |output| <= |input| elementwise. The bottleneck
    width is floor(C / reduction) with a floor of one unit.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 reduction: int = 16, dtype=np.float32):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.w_squeeze = Linear(channels, hidden, rng, dtype=dtype)
        self.w_excite = Linear(hidden, channels, rng, dtype=dtype)

    def forward(self, y: Tensor) -> Tensor:
        b, c = y.shape[0], y.shape[1]
        z = F.global_avg_pool3d(y)
        gates = F.sigmoid(self.w_excite(F.relu(self.w_squeeze(z))))
        return y * gates.reshape(b, c, 1, 1, 1)


def _to_tokens(x: Tensor) -> Tensor:
    b, c, d, h, w = x.shape
    return x.permute(0, 2, 3, 4, 1).reshape(b, d * h * w, c)


class CrossAttentionFusion(Module):
    """Skip fusion where upsampled decoder features query the encoder skip.

    Cross-attention runs inside non-overlapping windows with no positional
    bias and no shift; non-divisible grids are zero-padded and masked.
    """

    def __init__(self, c_dec: int, c_skip: int, c_out: int, rng: np.random.Generator,
                 heads: int = 4, window: int = 4, ghost_ratio: int = 2,
                 use_ghost: bool = True, dtype=np.float32):
        super().__init__()
        if c_dec % heads != 0:
            raise ValueError(f"decoder width {c_dec} not divisible by heads {heads}")
        self.c_dec = c_dec
        self.c_out = c_out
        self.heads = heads
        self.window = (window, window, window)
        self.skip_proj = Linear(c_skip, c_dec, rng, bias=True, dtype=dtype)
        self.q_proj = Linear(c_dec, c_dec, rng, dtype=dtype)
        self.kv_proj = Linear(c_dec, 2 * c_dec, rng, dtype=dtype)
        self.out_proj = Linear(c_dec, c_out, rng, dtype=dtype)
        self.se = SqueezeExcite(c_out, rng, dtype=dtype)
        if use_ghost:
            self.refine = GhostConv3d(c_out, c_out, 3, rng, stride=1, padding=1,
                                      ratio=ghost_ratio, dtype=dtype)
        else:
            self.refine = Conv3d(c_out, c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm = GroupNorm(groupnorm_groups(c_out), c_out, dtype=dtype)
        self._mask_cache = {}

    def _check_extents(self, dec: Tensor, skip: Tensor) -> None:
        for name, ds, ss in zip("DHW", dec.shape[2:], skip.shape[2:]):
            if ss != 2 * ds:
                raise ValueError(
                    f"skip extent along {name} must be exactly 2x decoder extent: "
                    f"decoder {dec.shape[2:]}, skip {skip.shape[2:]}")

    def attend(self, queries: Tensor, context: Tensor) -> Tensor:
        """Windowed cross-attention between two (B, C_dec, D, H, W) volumes."""
        b, c, d, h, w = queries.shape
        grid = padded_grid((d, h, w), self.window)
        q_vol = queries.permute(0, 2, 3, 4, 1)
        kv_vol = context.permute(0, 2, 3, 4, 1)
        if grid != (d, h, w):
            spatial_pad = [(0, 0)] + [(0, g - e) for g, e in zip(grid, (d, h, w))] + [(0, 0)]
            q_vol = pad(q_vol, spatial_pad)
            kv_vol = pad(kv_vol, spatial_pad)

        q = self.q_proj(window_partition(q_vol, self.window))
        kv = self.kv_proj(window_partition(kv_vol, self.window))
        k = kv[:, :, : self.c_dec]
        v = kv[:, :, self.c_dec:]

        key = (grid, (d, h, w))
        if key not in self._mask_cache:
            self._mask_cache[key] = build_shift_mask(grid, self.window, (0, 0, 0),
                                                     valid=(d, h, w))
        out = window_attention(q, k, v, self.heads, mask=self._mask_cache[key])
        out = self.out_proj(out)
        y = window_reverse(out, self.window, grid, b)
        if grid != (d, h, w):
            y = y[:, :d, :h, :w, :]
        return y.permute(0, 4, 1, 2, 3)

    def forward(self, dec: Tensor, skip: Tensor) -> Tensor:
        self._check_extents(dec, skip)
        up = F.trilinear_upsample(dec, 2)
        skip_tokens = self.skip_proj(_to_tokens(skip))
        b, _, d, h, w = up.shape
        skip_vol = skip_tokens.reshape(b, d, h, w, self.c_dec).permute(0, 4, 1, 2, 3)
        fused = self.attend(up, skip_vol)
        fused = self.se(fused)
        return F.silu(self.norm(self.refine(fused)))


class ConcatConvFusion(Module):
    """Ablation baseline: upsample, project skip, concatenate, 3x3x3 conv."""

    def __init__(self, c_dec: int, c_skip: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.c_dec = c_dec
        self.c_out = c_out
        self.skip_proj = Linear(c_skip, c_dec, rng, bias=True, dtype=dtype)
        self.conv = Conv3d(2 * c_dec, c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm = GroupNorm(groupnorm_groups(c_out), c_out, dtype=dtype)

    def forward(self, dec: Tensor, skip: Tensor) -> Tensor:
        for name, ds, ss in zip("DHW", dec.shape[2:], skip.shape[2:]):
            if ss != 2 * ds:
                raise ValueError(
                    f"skip extent along {name} must be exactly 2x decoder extent")
        up = F.trilinear_upsample(dec, 2)
        skip_tokens = self.skip_proj(_to_tokens(skip))
        b, _, d, h, w = up.shape
        skip_vol = skip_tokens.reshape(b, d, h, w, self.c_dec).permute(0, 4, 1, 2, 3)
        merged = concat([up, skip_vol], axis=1)
        return F.silu(self.norm(self.conv(merged)))


class FinalUpsampleBlock(Module):
    """Skip-free refinement back to full resolution: upsample 2x, ghost conv,
    GroupNorm, SiLU."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 ghost_ratio: int = 2, use_ghost: bool = True, dtype=np.float32):
        super().__init__()
        if use_ghost:
            self.refine = GhostConv3d(channels, channels, 3, rng, stride=1, padding=1,
                                      ratio=ghost_ratio, dtype=dtype)
        else:
            self.refine = Conv3d(channels, channels, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm = GroupNorm(groupnorm_groups(channels), channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.silu(self.norm(self.refine(F.trilinear_upsample(x, 2))))


class AuxHead(Module):
    """1x1x1 projection to class logits at the stage's native resolution."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.proj = Conv3d(channels, num_classes, 1, rng, dtype=dtype)

    def forward(self, feat: Tensor) -> Tensor:
        return self.proj(feat)
