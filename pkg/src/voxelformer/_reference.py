"""Pure-numpy convolution kernels.

These are the fallback used when the compiled extension is unavailable, and
the semantic reference the extension is tested against. Accumulation orders
are fixed so that both backends produce identical float64 results:

* forward:         per output element, terms added in (cin, kd, kh, kw) order
* backward_input:  per input element, terms added in (cout, kd, kh, kw) order
* backward_weight: reduction over (batch, spatial) is delegated to BLAS and
  therefore only agrees with the sequential extension loop to rounding
  (verified to ~1e-13 relative in float64, exact in exact arithmetic)

Shapes follow the (batch, channel, depth, height, width) layout everywhere.
"""

import numpy as np

AVAILABLE = True
NAME = "numpy"


def _out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * 3
    return np.pad(x, pad)


def conv3d_forward(x, w, stride, padding):
    b, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    do = _out_extent(d, k, stride, padding)
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(wd, k, stride, padding)
    xp = _pad_spatial(x, padding)
    out = np.zeros((b, cout, do, ho, wo), dtype=x.dtype)
    for ci in range(cin):
        xc = xp[:, ci]
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    patch = xc[
                        :,
                        kd : kd + stride * do : stride,
                        kh : kh + stride * ho : stride,
                        kw : kw + stride * wo : stride,
                    ]
                    out += w[:, ci, kd, kh, kw][None, :, None, None, None] * patch[:, None]
    return out


def conv3d_backward_input(gy, w, stride, padding, in_shape):
    b, cin, d, h, wd = in_shape
    cout, _, k, _, _ = w.shape
    _, _, do, ho, wo = gy.shape
    gxp = np.zeros((b, cin, d + 2 * padding, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for co in range(cout):
        g = gy[:, co]
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    gxp[
                        :,
                        :,
                        kd : kd + stride * do : stride,
                        kh : kh + stride * ho : stride,
                        kw : kw + stride * wo : stride,
                    ] += w[co, :, kd, kh, kw][None, :, None, None, None] * g[:, None]
    if padding == 0:
        return gxp
    return gxp[:, :, padding : padding + d, padding : padding + h, padding : padding + wd]


def conv3d_backward_weight(x, gy, stride, padding, w_shape):
    cout, cin, k, _, _ = w_shape
    _, _, do, ho, wo = gy.shape
    xp = _pad_spatial(x, padding)
    gw = np.zeros(w_shape, dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[
                    :,
                    :,
                    kd : kd + stride * do : stride,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                ]
                gw[:, :, kd, kh, kw] = np.tensordot(gy, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def dwconv3d_forward(x, w, stride, padding):
    b, c, d, h, wd = x.shape
    k = w.shape[2]
    do = _out_extent(d, k, stride, padding)
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(wd, k, stride, padding)
    xp = _pad_spatial(x, padding)
    out = np.zeros((b, c, do, ho, wo), dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[
                    :,
                    :,
                    kd : kd + stride * do : stride,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                ]
                out += w[:, 0, kd, kh, kw][None, :, None, None, None] * patch
    return out


def dwconv3d_backward_input(gy, w, stride, padding, in_shape):
    b, c, d, h, wd = in_shape
    k = w.shape[2]
    _, _, do, ho, wo = gy.shape
    gxp = np.zeros((b, c, d + 2 * padding, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                gxp[
                    :,
                    :,
                    kd : kd + stride * do : stride,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                ] += w[:, 0, kd, kh, kw][None, :, None, None, None] * gy
    if padding == 0:
        return gxp
    return gxp[:, :, padding : padding + d, padding : padding + h, padding : padding + wd]


def dwconv3d_backward_weight(x, gy, stride, padding, w_shape):
    c = w_shape[0]
    k = w_shape[2]
    _, _, do, ho, wo = gy.shape
    xp = _pad_spatial(x, padding)
    gw = np.zeros(w_shape, dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[
                    :,
                    :,
                    kd : kd + stride * do : stride,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                ]
                gw[:, 0, kd, kh, kw] = np.einsum("bcdhw,bcdhw->c", gy, patch)
    return gw
