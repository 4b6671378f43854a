# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Same contracts as voxelformer._reference, with matching accumulation orders
(see that module's docstring). Compiled with -ffp-contract=off so float64
results of forward and backward_input are identical to the numpy fallback.
Out-of-range taps are skipped instead of reading a zero-padded copy; the
skipped terms are exact zeros, so values are unchanged.

OpenMP parallelism partitions work by output element (forward, backward
input) or by weight element (backward weight); every element's accumulation
stays inside one thread, so results are identical for any thread count.
"""

import numpy as np

cimport cython
cimport openmp
from cython.parallel cimport prange

AVAILABLE = True
NAME = "native"

ctypedef fused real:
    float
    double

cdef int _num_threads = 0  # 0: OpenMP default


def set_num_threads(n):
    """Thread count for kernel loops; 0 restores the OpenMP default."""
    global _num_threads
    _num_threads = int(n)


def get_num_threads():
    return _num_threads


cdef inline int _threads() noexcept:
    if _num_threads > 0:
        return _num_threads
    return openmp.omp_get_max_threads()


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    if a <= 0:
        return 0
    return (a + b - 1) // b


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _conv3d_forward_impl(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                               real[:, :, :, :, ::1] out, Py_ssize_t stride,
                               Py_ssize_t padding, int nt) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t do_ = out.shape[2], ho = out.shape[3], wo = out.shape[4]
    cdef Py_ssize_t t, bi, co, ci, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, idd, ih, iw
    cdef real wv

    for t in prange(b * cout, num_threads=nt, schedule="static"):
        bi = t // cout
        co = t % cout
        for ci in range(cin):
            for kd in range(k):
                od0 = _ceil_div(padding - kd, stride)
                od1 = (d - 1 - kd + padding) // stride
                if od1 > do_ - 1:
                    od1 = do_ - 1
                for kh in range(k):
                    oh0 = _ceil_div(padding - kh, stride)
                    oh1 = (h - 1 - kh + padding) // stride
                    if oh1 > ho - 1:
                        oh1 = ho - 1
                    for kw in range(k):
                        ow0 = _ceil_div(padding - kw, stride)
                        ow1 = (wd - 1 - kw + padding) // stride
                        if ow1 > wo - 1:
                            ow1 = wo - 1
                        wv = w[co, ci, kd, kh, kw]
                        for od in range(od0, od1 + 1):
                            idd = od * stride + kd - padding
                            for oh in range(oh0, oh1 + 1):
                                ih = oh * stride + kh - padding
                                for ow in range(ow0, ow1 + 1):
                                    iw = ow * stride + kw - padding
                                    out[bi, co, od, oh, ow] += wv * x[bi, ci, idd, ih, iw]


def conv3d_forward(x, w, stride, padding):
    b, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    out = np.zeros((b, cout, do, ho, wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _conv3d_forward_impl[float](x, w, out, stride, padding, _threads())
    else:
        _conv3d_forward_impl[double](x, w, out, stride, padding, _threads())
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _conv3d_backward_input_impl(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w,
                                      real[:, :, :, :, ::1] gx, Py_ssize_t stride,
                                      Py_ssize_t padding, int nt) noexcept nogil:
    cdef Py_ssize_t b = gy.shape[0], cout = gy.shape[1]
    cdef Py_ssize_t do_ = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t cin = gx.shape[1], d = gx.shape[2], h = gx.shape[3], wd = gx.shape[4]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t t, bi, co, ci, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, idd, ih, iw
    cdef real wv

    for t in prange(b * cin, num_threads=nt, schedule="static"):
        bi = t // cin
        ci = t % cin
        for co in range(cout):
            for kd in range(k):
                od0 = _ceil_div(padding - kd, stride)
                od1 = (d - 1 - kd + padding) // stride
                if od1 > do_ - 1:
                    od1 = do_ - 1
                for kh in range(k):
                    oh0 = _ceil_div(padding - kh, stride)
                    oh1 = (h - 1 - kh + padding) // stride
                    if oh1 > ho - 1:
                        oh1 = ho - 1
                    for kw in range(k):
                        ow0 = _ceil_div(padding - kw, stride)
                        ow1 = (wd - 1 - kw + padding) // stride
                        if ow1 > wo - 1:
                            ow1 = wo - 1
                        wv = w[co, ci, kd, kh, kw]
                        for od in range(od0, od1 + 1):
                            idd = od * stride + kd - padding
                            for oh in range(oh0, oh1 + 1):
                                ih = oh * stride + kh - padding
                                for ow in range(ow0, ow1 + 1):
                                    iw = ow * stride + kw - padding
                                    gx[bi, ci, idd, ih, iw] += wv * gy[bi, co, od, oh, ow]


def conv3d_backward_input(gy, w, stride, padding, in_shape):
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w)
    gx = np.zeros(in_shape, dtype=gy.dtype)
    if gy.dtype == np.float32:
        _conv3d_backward_input_impl[float](gy, w, gx, stride, padding, _threads())
    else:
        _conv3d_backward_input_impl[double](gy, w, gx, stride, padding, _threads())
    return gx


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _conv3d_backward_weight_impl(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] gy,
                                       real[:, :, :, :, ::1] gw, Py_ssize_t stride,
                                       Py_ssize_t padding, int nt) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t cout = gy.shape[1], k = gw.shape[2]
    cdef Py_ssize_t do_ = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t t, bi, co, ci, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, idd, ih, iw
    cdef real acc

    for t in prange(cout * cin, num_threads=nt, schedule="static"):
        co = t // cin
        ci = t % cin
        for kd in range(k):
            od0 = _ceil_div(padding - kd, stride)
            od1 = (d - 1 - kd + padding) // stride
            if od1 > do_ - 1:
                od1 = do_ - 1
            for kh in range(k):
                oh0 = _ceil_div(padding - kh, stride)
                oh1 = (h - 1 - kh + padding) // stride
                if oh1 > ho - 1:
                    oh1 = ho - 1
                for kw in range(k):
                    ow0 = _ceil_div(padding - kw, stride)
                    ow1 = (wd - 1 - kw + padding) // stride
                    if ow1 > wo - 1:
                        ow1 = wo - 1
                    acc = 0
                    for bi in range(b):
                        for od in range(od0, od1 + 1):
                            idd = od * stride + kd - padding
                            for oh in range(oh0, oh1 + 1):
                                ih = oh * stride + kh - padding
                                for ow in range(ow0, ow1 + 1):
                                    iw = ow * stride + kw - padding
                                    acc = acc + x[bi, ci, idd, ih, iw] * gy[bi, co, od, oh, ow]
                    gw[co, ci, kd, kh, kw] = acc


def conv3d_backward_weight(x, gy, stride, padding, w_shape):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    gw = np.zeros(w_shape, dtype=x.dtype)
    if x.dtype == np.float32:
        _conv3d_backward_weight_impl[float](x, gy, gw, stride, padding, _threads())
    else:
        _conv3d_backward_weight_impl[double](x, gy, gw, stride, padding, _threads())
    return gw


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _dwconv3d_forward_impl(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                                 real[:, :, :, :, ::1] out, Py_ssize_t stride,
                                 Py_ssize_t padding, int nt) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t do_ = out.shape[2], ho = out.shape[3], wo = out.shape[4]
    cdef Py_ssize_t t, bi, ci, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, idd, ih, iw
    cdef real wv

    for t in prange(b * c, num_threads=nt, schedule="static"):
        bi = t // c
        ci = t % c
        for kd in range(k):
            od0 = _ceil_div(padding - kd, stride)
            od1 = (d - 1 - kd + padding) // stride
            if od1 > do_ - 1:
                od1 = do_ - 1
            for kh in range(k):
                oh0 = _ceil_div(padding - kh, stride)
                oh1 = (h - 1 - kh + padding) // stride
                if oh1 > ho - 1:
                    oh1 = ho - 1
                for kw in range(k):
                    ow0 = _ceil_div(padding - kw, stride)
                    ow1 = (wd - 1 - kw + padding) // stride
                    if ow1 > wo - 1:
                        ow1 = wo - 1
                    wv = w[ci, 0, kd, kh, kw]
                    for od in range(od0, od1 + 1):
                        idd = od * stride + kd - padding
                        for oh in range(oh0, oh1 + 1):
                            ih = oh * stride + kh - padding
                            for ow in range(ow0, ow1 + 1):
                                iw = ow * stride + kw - padding
                                out[bi, ci, od, oh, ow] += wv * x[bi, ci, idd, ih, iw]


def dwconv3d_forward(x, w, stride, padding):
    b, c, d, h, wd = x.shape
    k = w.shape[2]
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    out = np.zeros((b, c, do, ho, wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _dwconv3d_forward_impl[float](x, w, out, stride, padding, _threads())
    else:
        _dwconv3d_forward_impl[double](x, w, out, stride, padding, _threads())
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _dwconv3d_backward_input_impl(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w,
                                        real[:, :, :, :, ::1] gx, Py_ssize_t stride,
                                        Py_ssize_t padding, int nt) noexcept nogil:
    cdef Py_ssize_t b = gy.shape[0], c = gy.shape[1]
    cdef Py_ssize_t do_ = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t d = gx.shape[2], h = gx.shape[3], wd = gx.shape[4]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t t, bi, ci, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, idd, ih, iw
    cdef real wv

    for t in prange(b * c, num_threads=nt, schedule="static"):
        bi = t // c
        ci = t % c
        for kd in range(k):
            od0 = _ceil_div(padding - kd, stride)
            od1 = (d - 1 - kd + padding) // stride
            if od1 > do_ - 1:
                od1 = do_ - 1
            for kh in range(k):
                oh0 = _ceil_div(padding - kh, stride)
                oh1 = (h - 1 - kh + padding) // stride
                if oh1 > ho - 1:
                    oh1 = ho - 1
                for kw in range(k):
                    ow0 = _ceil_div(padding - kw, stride)
                    ow1 = (wd - 1 - kw + padding) // stride
                    if ow1 > wo - 1:
                        ow1 = wo - 1
                    wv = w[ci, 0, kd, kh, kw]
                    for od in range(od0, od1 + 1):
                        idd = od * stride + kd - padding
                        for oh in range(oh0, oh1 + 1):
                            ih = oh * stride + kh - padding
                            for ow in range(ow0, ow1 + 1):
                                iw = ow * stride + kw - padding
                                gx[bi, ci, idd, ih, iw] += wv * gy[bi, ci, od, oh, ow]


def dwconv3d_backward_input(gy, w, stride, padding, in_shape):
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w)
    gx = np.zeros(in_shape, dtype=gy.dtype)
    if gy.dtype == np.float32:
        _dwconv3d_backward_input_impl[float](gy, w, gx, stride, padding, _threads())
    else:
        _dwconv3d_backward_input_impl[double](gy, w, gx, stride, padding, _threads())
    return gx


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _dwconv3d_backward_weight_impl(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] gy,
                                         real[:, :, :, :, ::1] gw, Py_ssize_t stride,
                                         Py_ssize_t padding, int nt) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t k = gw.shape[2]
    cdef Py_ssize_t do_ = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t ci, bi, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, idd, ih, iw
    cdef real acc

    for ci in prange(c, num_threads=nt, schedule="static"):
        for kd in range(k):
            od0 = _ceil_div(padding - kd, stride)
            od1 = (d - 1 - kd + padding) // stride
            if od1 > do_ - 1:
                od1 = do_ - 1
            for kh in range(k):
                oh0 = _ceil_div(padding - kh, stride)
                oh1 = (h - 1 - kh + padding) // stride
                if oh1 > ho - 1:
                    oh1 = ho - 1
                for kw in range(k):
                    ow0 = _ceil_div(padding - kw, stride)
                    ow1 = (wd - 1 - kw + padding) // stride
                    if ow1 > wo - 1:
                        ow1 = wo - 1
                    acc = 0
                    for bi in range(b):
                        for od in range(od0, od1 + 1):
                            idd = od * stride + kd - padding
                            for oh in range(oh0, oh1 + 1):
                                ih = oh * stride + kh - padding
                                for ow in range(ow0, ow1 + 1):
                                    iw = ow * stride + kw - padding
                                    acc = acc + x[bi, ci, idd, ih, iw] * gy[bi, ci, od, oh, ow]
                    gw[ci, 0, kd, kh, kw] = acc


def dwconv3d_backward_weight(x, gy, stride, padding, w_shape):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    gw = np.zeros(w_shape, dtype=x.dtype)
    if x.dtype == np.float32:
        _dwconv3d_backward_weight_impl[float](x, gy, gw, stride, padding, _threads())
    else:
        _dwconv3d_backward_weight_impl[double](x, gy, gw, stride, padding, _threads())
    return gw
