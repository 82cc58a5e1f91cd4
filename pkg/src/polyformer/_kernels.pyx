# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels for conv2d.

Column layout is (Cin*k*k, B*Hout*Wout), row index (c*k + ki)*k + kj.
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline void _span(Py_ssize_t kj, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W, Py_ssize_t Wo,
                       Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox with 0 <= ox*stride + kj - pad < W
    cdef Py_ssize_t a = pad - kj
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    cdef Py_ssize_t b = W - 1 + pad - kj
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > Wo:
        hi[0] = Wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def _im2col(real[:, :, :, ::1] x, int k, int stride, int pad, real[:, ::1] out):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t b, c, ki, kj, oy, ox, iy, lo, hi, off
    cdef real* dst
    cdef const real* src
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    _span(kj, stride, pad, W, Wo, &lo, &hi)
                    off = kj - pad
                    dst = &out[(c * k + ki) * k + kj, 0]
                    for b in range(B):
                        for oy in range(Ho):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= H:
                                for ox in range(Wo):
                                    dst[ox] = 0
                            else:
                                src = &x[b, c, iy, 0]
                                for ox in range(lo):
                                    dst[ox] = 0
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dst[ox] = src[ox + off]
                                else:
                                    for ox in range(lo, hi):
                                        dst[ox] = src[ox * stride + off]
                                for ox in range(hi, Wo):
                                    dst[ox] = 0
                            dst += Wo


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int k, int stride, int pad):
    # out must be zeroed; accumulation runs in (ki, kj) order per element
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t b, c, ki, kj, oy, ox, iy, lo, hi, off
    cdef const real* src
    cdef real* dst
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    _span(kj, stride, pad, W, Wo, &lo, &hi)
                    off = kj - pad
                    src = &cols[(c * k + ki) * k + kj, 0]
                    for b in range(B):
                        for oy in range(Ho):
                            iy = oy * stride + ki - pad
                            if 0 <= iy < H:
                                dst = &out[b, c, iy, 0]
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dst[ox + off] += src[ox]
                                else:
                                    for ox in range(lo, hi):
                                        dst[ox * stride + off] += src[ox]
                            src += Wo


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.empty((C * k * k, B * Ho * Wo), dtype=x.dtype)
    if out.size:
        _im2col(x, k, stride, pad, out)
    return out


def col2im(cols, shape, int k, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    if cols.size:
        _col2im(cols, out, k, stride, pad)
    return out
