"""Hot loops for the convolution and pooling primitives.

Every kernel has a numba ``@njit`` implementation and a pure-numpy
fallback with the same accumulation order, so both paths give
bit-identical results. The backend is picked once at import time:

    FEDVIRT_KERNELS=numba   (default when numba imports)
    FEDVIRT_KERNELS=numpy   force the fallback
"""
import ctypes
import os
import sys

import numpy as np


def _tune_malloc():
    """Keep freed activation buffers in the heap instead of returning them to the OS.

    glibc serves multi-megabyte arrays with mmap and unmaps them on free, so
    every forward pass page-faults its activations in again; that roughly
    doubled the cost of a ConvNet step. Disable with FEDVIRT_MALLOC_TUNE=0.
    """
    if os.environ.get("FEDVIRT_MALLOC_TUNE", "1") == "0" or not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    return bool(libc.mallopt(m_mmap_threshold, 1 << 30) and libc.mallopt(m_trim_threshold, 1 << 30))


MALLOC_TUNED = _tune_malloc()

_requested = os.environ.get("FEDVIRT_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"FEDVIRT_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested != "numba":
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------

def im2col_numpy(x, kh, kw, stride, pad):
    """[N,C,H,W] -> per-sample columns [N, C*kh*kw, Ho*Wo]."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add columns back into an image batch."""
    n, c, h, w = x_shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def avgpool_numpy(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    acc = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            acc += x[:, :, i:i + k * ho:k, j:j + k * wo:k]
    return acc / (k * k)


def avgunpool_numpy(g, k, x_shape):
    n, c, h, w = x_shape
    ho, wo = g.shape[2], g.shape[3]
    out = np.zeros(x_shape, dtype=np.float64)
    share = g / (k * k)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + k * ho:k, j:j + k * wo:k] = share
    return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    @njit(cache=True, nogil=True)
    def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
        n, c, h, w = x.shape
        cols = np.empty((n, c * kh * kw, ho * wo))
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oh in range(ho):
                            ih = oh * stride + i - pad
                            for ow in range(wo):
                                iw = ow * stride + j - pad
                                if ih >= 0 and ih < h and iw >= 0 and iw < w:
                                    cols[b, row, oh * wo + ow] = x[b, ci, ih, iw]
                                else:
                                    cols[b, row, oh * wo + ow] = 0.0
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, ho, wo):
        out = np.zeros((n, c, h, w))
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oh in range(ho):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride + j - pad
                                if iw >= 0 and iw < w:
                                    out[b, ci, ih, iw] += cols[b, row, oh * wo + ow]
        return out

    @njit(cache=True, nogil=True)
    def _avgpool_nb(x, k):
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        out = np.zeros((n, c, ho, wo))
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for ci in range(c):
                        for oh in range(ho):
                            for ow in range(wo):
                                out[b, ci, oh, ow] += x[b, ci, oh * k + i, ow * k + j]
        return out / (k * k)

    @njit(cache=True, nogil=True)
    def _avgunpool_nb(g, k, h, w):
        n, c, ho, wo = g.shape
        out = np.zeros((n, c, h, w))
        share = g / (k * k)
        for b in range(n):
            for ci in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        v = share[b, ci, oh, ow]
                        for i in range(k):
                            for j in range(k):
                                out[b, ci, oh * k + i, ow * k + j] = v
        return out

    def im2col_numba(x, kh, kw, stride, pad):
        h, w = x.shape[2], x.shape[3]
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad,
                          out_size(h, kh, stride, pad), out_size(w, kw, stride, pad))

    def col2im_numba(cols, x_shape, kh, kw, stride, pad):
        n, c, h, w = x_shape
        cols = np.ascontiguousarray(cols).reshape(n, c * kh * kw, -1)
        return _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad,
                          out_size(h, kh, stride, pad), out_size(w, kw, stride, pad))

    def avgpool_numba(x, k):
        return _avgpool_nb(np.ascontiguousarray(x), k)

    def avgunpool_numba(g, k, x_shape):
        return _avgunpool_nb(np.ascontiguousarray(g), k, x_shape[2], x_shape[3])

    im2col, col2im = im2col_numba, col2im_numba
    avgpool, avgunpool = avgpool_numba, avgunpool_numba
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    avgpool, avgunpool = avgpool_numpy, avgunpool_numpy
