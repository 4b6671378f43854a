"""Shifted-window attention machinery for 3-D volumes.

Feature layout inside this module is channels-last (B, D, H, W, C), the
natural layout for window partitioning. The attention core is shared between
encoder self-attention and decoder cross-attention; both run per window with
an optional additive {0, -inf} mask, and -inf produces exactly zero weight.

Non-divisible extents are right-padded with zeros up to window multiples and
cropped after window reversal; padded tokens are masked as a region of their
own so no real token attends to padding.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .nn import Linear, Module, Parameter
from .tensor import Tensor, pad, roll

Grid = Tuple[int, int, int]


def cyclic_shift(x: Tensor, shift: Sequence[int]) -> Tensor:
    """Toroidal roll of (B, D, H, W, C) features; positive shifts move content
    toward higher indices. Inverse is cyclic_shift with negated shifts."""
    if x.ndim != 5:
        raise ValueError(f"cyclic_shift expects (B, D, H, W, C), got {x.shape}")
    return roll(x, tuple(int(s) for s in shift), axes=(1, 2, 3))


def window_partition(x: Tensor, window: Grid) -> Tensor:
    """(B, D, H, W, C) -> (B * M, T, C) with T = wd*wh*ww window tokens.

    Extents must already be multiples of the window; padding is the caller's
    contract. Windows are ordered row-major over the window grid and batch-major
    overall, matching window_reverse.
    """
    b, d, h, w, c = x.shape
    wd, wh, ww = window
    if d % wd or h % wh or w % ww:
        raise ValueError(f"grid {(d, h, w)} not divisible by window {window}")
    x = x.reshape(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    m = (d // wd) * (h // wh) * (w // ww)
    return x.reshape(b * m, wd * wh * ww, c)


def window_reverse(windows: Tensor, window: Grid, grid: Grid, batch: int) -> Tensor:
    """Inverse of window_partition: (B * M, T, C) -> (B, D, H, W, C)."""
    d, h, w = grid
    wd, wh, ww = window
    c = windows.shape[-1]
    x = windows.reshape(batch, d // wd, h // wh, w // ww, wd, wh, ww, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(batch, d, h, w, c)


def num_windows(grid: Grid, window: Grid) -> int:
    d, h, w = grid
    wd, wh, ww = window
    return (d // wd) * (h // wh) * (w // ww)


def padded_grid(grid: Grid, window: Grid) -> Grid:
    return tuple(g + (-g) % w for g, w in zip(grid, window))


def _axis_segments(extent: int, win: int, shift: int) -> np.ndarray:
    """Per-position segment ids in the standard three-slice labeling.

    Positions [0, S-w), [S-w, S-s), [S-s, S) form segments 0, 1, 2; with
    shift 0 the whole axis is one segment. Equal composite labels within a
    shifted window mark tokens that are contiguous in the unshifted volume.
    """
    labels = np.zeros(extent, dtype=np.int64)
    if shift > 0:
        labels[extent - win:] = 1
        labels[extent - shift:] = 2
    return labels


def build_shift_mask(grid: Grid, window: Grid, shift: Grid,
                     valid: Optional[Grid] = None) -> Optional[np.ndarray]:
    """Additive attention mask (M, T, T) with entries in {0, -inf}.

    ``grid`` is the padded (window-divisible) extent; ``valid`` gives the
    original extents when the caller padded, and padded tokens become a
    region of their own. Returns None when no pair needs blocking (zero
    shift and no padding). The mask is symmetric, and mask[i, i] == 0, so
    no softmax row is ever entirely -inf.
    """
    d, h, w = grid
    wd, wh, ww = window
    sd, sh, sw = shift
    shifted = any(s > 0 for s in shift)
    padded = valid is not None and tuple(valid) != (d, h, w)
    if not shifted and not padded:
        return None

    seg_d = _axis_segments(d, wd, sd)
    seg_h = _axis_segments(h, wh, sh)
    seg_w = _axis_segments(w, ww, sw)
    labels = (seg_d[:, None, None] * 9 + seg_h[None, :, None] * 3 + seg_w[None, None, :])

    if padded:
        vd, vh, vw = valid
        # a position holds padding if its pre-roll source coordinate is out of range
        src_d = (np.arange(d) + sd) % d
        src_h = (np.arange(h) + sh) % h
        src_w = (np.arange(w) + sw) % w
        is_pad = ((src_d >= vd)[:, None, None]
                  | (src_h >= vh)[None, :, None]
                  | (src_w >= vw)[None, None, :])
        labels = np.where(is_pad, -1, labels)

    lab = Tensor(labels.astype(np.float32)[None, :, :, :, None])
    lab_windows = window_partition(lab, window).data[:, :, 0]  # (M, T)
    diff = lab_windows[:, :, None] != lab_windows[:, None, :]
    mask = np.where(diff, -np.inf, 0.0).astype(np.float32)
    return mask


class RelativePositionBias(Module):
    """Learned additive logits indexed by the 3-D offset between window tokens.

    The table has (2wd-1)(2wh-1)(2ww-1) rows, one per distinct offset, shared
    across all windows; it is zero-initialized so attention starts unbiased.
    """

    def __init__(self, window: Grid, heads: int, dtype=np.float32):
        super().__init__()
        wd, wh, ww = window
        self.window = window
        self.heads = heads
        rows = (2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1)
        self.table = Parameter(np.zeros((rows, heads), dtype=dtype))

        coords = np.stack(np.meshgrid(
            np.arange(wd), np.arange(wh), np.arange(ww), indexing="ij"))
        flat = coords.reshape(3, -1)  # (3, T)
        rel = flat[:, :, None] - flat[:, None, :]  # (3, T, T)
        rel[0] += wd - 1
        rel[1] += wh - 1
        rel[2] += ww - 1
        self.index = (rel[0] * (2 * wh - 1) * (2 * ww - 1)
                      + rel[1] * (2 * ww - 1) + rel[2]).reshape(-1)

    def forward(self) -> Tensor:
        t = self.window[0] * self.window[1] * self.window[2]
        from .tensor import take_rows
        bias = take_rows(self.table, self.index)  # (T*T, heads)
        return bias.reshape(t, t, self.heads).permute(2, 0, 1)  # (heads, T, T)


def window_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                     bias: Optional[Tensor] = None,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention inside windows.

    q, k, v: (B*M, T, C) with C divisible by heads; bias: (heads, T, T);
    mask: (M, T, T) additive {0, -inf}, broadcast over batch and heads.
    Returns (B*M, T, C); the output projection is the caller's.
    """
    bm, t, c = q.shape
    if c % heads != 0:
        raise ValueError(f"channels ({c}) not divisible by heads ({heads})")
    dk = c // heads

    def split_heads(x):
        return x.reshape(bm, t, heads, dk).permute(0, 2, 1, 3)  # (BM, heads, T, dk)

    qh = split_heads(q) * (1.0 / np.sqrt(dk))
    kh = split_heads(k)
    vh = split_heads(v)
    logits = qh @ kh.permute(0, 1, 3, 2)  # (BM, heads, T, T)
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        m = mask.shape[0]
        b = bm // m
        logits = logits.reshape(b, m, heads, t, t) + Tensor(
            mask.astype(q.data.dtype).reshape(1, m, 1, t, t))
        logits = logits.reshape(bm, heads, t, t)
    attn = F.softmax_lastdim(logits)
    out = attn @ vh  # (BM, heads, T, dk)
    return out.permute(0, 2, 1, 3).reshape(bm, t, c)


class WindowSelfAttention(Module):
    """W-MSA / SW-MSA over a channels-last volume, with relative position bias.

    Handles the full pipeline: pad to window multiples, cyclic shift,
    partition, masked attention, reverse, unshift, crop.
    """

    def __init__(self, channels: int, heads: int, window: Grid,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels ({channels}) not divisible by heads ({heads})")
        self.channels = channels
        self.heads = heads
        self.window = tuple(window)
        self.q_proj = Linear(channels, channels, rng, dtype=dtype)
        self.k_proj = Linear(channels, channels, rng, dtype=dtype)
        self.v_proj = Linear(channels, channels, rng, dtype=dtype)
        self.out_proj = Linear(channels, channels, rng, dtype=dtype)
        self.bias = RelativePositionBias(self.window, heads, dtype=dtype)
        self._mask_cache = {}

    def _mask_for(self, grid: Grid, shift: Grid, valid: Grid):
        key = (grid, shift, valid)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_shift_mask(grid, self.window, shift, valid)
        return self._mask_cache[key]

    def forward(self, x: Tensor, shifted: bool) -> Tensor:
        b, d0, h0, w0, c = x.shape
        wd, wh, ww = self.window
        shift = (wd // 2, wh // 2, ww // 2) if shifted else (0, 0, 0)

        grid = padded_grid((d0, h0, w0), self.window)
        if grid != (d0, h0, w0):
            x = pad(x, [(0, 0), (0, grid[0] - d0), (0, grid[1] - h0),
                        (0, grid[2] - w0), (0, 0)])
        if any(shift):
            x = cyclic_shift(x, tuple(-s for s in shift))

        tokens = window_partition(x, self.window)
        q = self.q_proj(tokens)
        k = self.k_proj(tokens)
        v = self.v_proj(tokens)
        mask = self._mask_for(grid, shift, (d0, h0, w0))
        out = window_attention(q, k, v, self.heads, bias=self.bias(), mask=mask)
        out = self.out_proj(out)

        y = window_reverse(out, self.window, grid, b)
        if any(shift):
            y = cyclic_shift(y, shift)
        if grid != (d0, h0, w0):
            y = y[:, :d0, :h0, :w0, :]
        return y


def attention_flops(grid: Grid, window: Grid, channels: int, heads: int) -> int:
    """Analytic FLOPs (multiply-accumulate counted as 2) of one windowed
    self-attention application on a window-divisible grid: the four C x C
    projections plus the two T x T matmuls per window. Softmax, bias, and
    normalization are excluded. Linear in voxel count at fixed window size."""
    d, h, w = grid
    wd, wh, ww = window
    if d % wd or h % wh or w % ww:
        raise ValueError(f"grid {grid} not divisible by window {window}")
    n = d * h * w
    t = wd * wh * ww
    m = num_windows(grid, window)
    if channels % heads != 0:
        raise ValueError(f"channels ({channels}) not divisible by heads ({heads})")
    return 8 * n * channels * channels + 4 * m * t * t * channels


def cross_attention_flops(grid: Grid, window: Grid, c_query: int, c_out: int) -> int:
    """Analytic FLOPs of windowed cross-attention: query / key-value / output
    projections plus the per-window matmuls. Same conventions as
    attention_flops; the skip projection is counted by the caller."""
    d, h, w = grid
    n = d * h * w
    t = window[0] * window[1] * window[2]
    m = num_windows(grid, window)
    return (2 * n * c_query * c_query          # q projection
            + 4 * n * c_query * c_query        # fused kv projection
            + 4 * m * t * t * c_query          # logits + weighted values
            + 2 * n * c_query * c_out)         # output projection
