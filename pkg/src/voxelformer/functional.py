"""Differentiable operators used by the network.

Convolutions dispatch to the active kernel backend (compiled or numpy); the
backend in effect at call time is captured so the backward pass uses the same
implementation. Everything else is numpy plus tape closures.

Volumes are (batch, channel, depth, height, width); token sequences are
(batch, tokens, channels).
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from . import backends
from .tensor import Tensor, _accum, pad


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 3-D convolution, zero-padded borders.

    Output extents follow S' = floor((S + 2p - k) / s) + 1 per axis.
    """
    if x.ndim != 5:
        raise ValueError(f"conv3d expects a 5-D input, got shape {x.shape}")
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ValueError(f"conv3d expects cubic weights (cout, cin, k, k, k), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if stride < 1:
        raise ValueError(f"conv3d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv3d padding must be >= 0, got {padding}")
    k = w.shape[2]
    for name, extent in zip("DHW", x.shape[2:]):
        out_extent = (extent + 2 * padding - k) // stride + 1
        if out_extent < 1:
            raise ValueError(
                f"conv3d output extent < 1 along {name}: input {extent}, kernel {k}, "
                f"stride {stride}, padding {padding}")

    kern = backends.kernels()
    rg = x.requires_grad or w.requires_grad
    out = Tensor(kern.conv3d_forward(x.data, w.data, stride, padding), rg, (x, w))
    if rg:
        def bw(g):
            g = np.ascontiguousarray(g)
            if x.requires_grad:
                _accum(x, kern.conv3d_backward_input(g, w.data, stride, padding, x.data.shape))
            if w.requires_grad:
                _accum(w, kern.conv3d_backward_weight(x.data, g, stride, padding, w.data.shape))
        out._backward = bw
    return out


def depthwise_conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 3-D convolution: one filter per input channel (groups == C)."""
    if x.ndim != 5:
        raise ValueError(f"depthwise_conv3d expects a 5-D input, got shape {x.shape}")
    if w.ndim != 5 or w.shape[1] != 1:
        raise ValueError(f"depthwise_conv3d expects weights (c, 1, k, k, k), got {w.shape}")
    if w.shape[0] != x.shape[1]:
        raise ValueError(
            f"depthwise_conv3d filter count {w.shape[0]} != input channels {x.shape[1]}")
    if not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ValueError(f"depthwise_conv3d expects cubic weights, got {w.shape}")
    k = w.shape[2]
    for name, extent in zip("DHW", x.shape[2:]):
        if (extent + 2 * padding - k) // stride + 1 < 1:
            raise ValueError(f"depthwise_conv3d output extent < 1 along {name}")

    kern = backends.kernels()
    rg = x.requires_grad or w.requires_grad
    out = Tensor(kern.dwconv3d_forward(x.data, w.data, stride, padding), rg, (x, w))
    if rg:
        def bw(g):
            g = np.ascontiguousarray(g)
            if x.requires_grad:
                _accum(x, kern.dwconv3d_backward_input(g, w.data, stride, padding, x.data.shape))
            if w.requires_grad:
                _accum(w, kern.dwconv3d_backward_weight(x.data, g, stride, padding, w.data.shape))
        out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis, broadcasting over leading axes."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weights {w.shape}")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis.

    -inf logits produce exactly zero weight (and exactly zero gradient);
    rows of all -inf produce NaN, which callers must not construct.
    """
    d = x.data
    m = np.max(d, axis=-1, keepdims=True)
    e = np.exp(d - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, x.requires_grad, (x,))
    if out.requires_grad:
        def bw(g):
            inner = (g * p).sum(axis=-1, keepdims=True)
            _accum(x, p * (g - inner))
        out._backward = bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across the trailing channel axis for each token independently."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels ({c},)")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * (var + eps).pow(-0.5)
    return normed * gamma + beta


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) normalization over channels-in-group and all voxels."""
    if x.ndim != 5:
        raise ValueError(f"group_norm expects a 5-D input, got shape {x.shape}")
    b, c, d, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm channels ({c}) not divisible by groups ({groups})")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm affine shapes must be ({c},)")
    xg = x.reshape(b, groups, c // groups, d, h, w)
    mu = xg.mean(axis=(2, 3, 4, 5), keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=(2, 3, 4, 5), keepdims=True)
    normed = (centered * (var + eps).pow(-0.5)).reshape(b, c, d, h, w)
    return normed * gamma.reshape(1, c, 1, 1, 1) + beta.reshape(1, c, 1, 1, 1)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


def _interp_axis(x: Tensor, axis: int, scale: int) -> Tensor:
    """Linear interpolation along one axis, half-pixel centers, edge clamped."""
    extent = x.shape[axis]
    out_extent = extent * scale
    pos = (np.arange(out_extent) + 0.5) / scale - 0.5
    lo = np.floor(pos)
    w_hi = (pos - lo).astype(x.data.dtype)
    w_lo = (1.0 - w_hi).astype(x.data.dtype)
    i_lo = np.clip(lo, 0, extent - 1).astype(np.intp)
    i_hi = np.clip(lo + 1, 0, extent - 1).astype(np.intp)

    bshape = [1] * x.ndim
    bshape[axis] = out_extent
    w_lo_b = w_lo.reshape(bshape)
    w_hi_b = w_hi.reshape(bshape)

    data = (np.take(x.data, i_lo, axis=axis) * w_lo_b
            + np.take(x.data, i_hi, axis=axis) * w_hi_b)
    out = Tensor(data, x.requires_grad, (x,))
    if out.requires_grad:
        def bw(g):
            gx = np.zeros_like(x.data)
            gx_m = np.moveaxis(gx, axis, 0)
            g_m = np.moveaxis(g * w_lo_b, axis, 0)
            np.add.at(gx_m, i_lo, g_m)
            g_m = np.moveaxis(g * w_hi_b, axis, 0)
            np.add.at(gx_m, i_hi, g_m)
            _accum(x, gx)
        out._backward = bw
    return out


def trilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Integer-factor trilinear upsampling with half-pixel centers.

    Separable: one linear interpolation per spatial axis, which is exact for
    trilinear weights. Constant volumes map to the same constant.
    """
    if x.ndim != 5:
        raise ValueError(f"trilinear_upsample expects a 5-D input, got shape {x.shape}")
    if int(scale) != scale or scale < 1:
        raise ValueError(f"trilinear_upsample scale must be a positive integer, got {scale}")
    if scale == 1:
        return x
    for axis in (2, 3, 4):
        x = _interp_axis(x, axis, int(scale))
    return x


def global_avg_pool3d(x: Tensor) -> Tensor:
    """Mean over all voxels per channel: (B, C, D, H, W) -> (B, C)."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool3d expects a 5-D input, got shape {x.shape}")
    return x.mean(axis=(2, 3, 4))


def pad_volume_to_multiple(x: Tensor, multiple: int) -> Tuple[Tensor, Tuple[int, int, int]]:
    """Right-pad the spatial extents of a volume up to a multiple; returns
    the padded tensor and the original (D, H, W) for cropping afterwards."""
    b, c, d, h, w = x.shape
    pd = (-d) % multiple
    ph = (-h) % multiple
    pw = (-w) % multiple
    if pd == ph == pw == 0:
        return x, (d, h, w)
    padded = pad(x, [(0, 0), (0, 0), (0, pd), (0, ph), (0, pw)])
    return padded, (d, h, w)
