# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled 2-D cross-correlation kernel (float64, NCHW x OIHW, valid only).

The kernel is repacked so the innermost loop runs contiguously over output
channels: every input value loaded feeds O multiply-accumulates, which keeps
the loop vectorizable and the weight rows streaming from cache.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(x, w, int stride):
    """Valid cross-correlation; padding is handled by the caller."""
    cdef cnp.ndarray[cnp.float64_t, ndim=4, mode="c"] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=4, mode="c"] wa = np.ascontiguousarray(w, dtype=np.float64)

    cdef Py_ssize_t n = xa.shape[0], c = xa.shape[1], h = xa.shape[2], width = xa.shape[3]
    cdef Py_ssize_t o = wa.shape[0], ci = wa.shape[1], kh = wa.shape[2], kw = wa.shape[3]
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if kh > h or kw > width:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{width}")

    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (width - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=4, mode="c"] out = np.empty((n, o, oh, ow), dtype=np.float64)

    # weights packed as (c*kh*kw, o): one contiguous row per input tap
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] wp = np.ascontiguousarray(
        wa.transpose(1, 2, 3, 0).reshape(c * kh * kw, o)
    )
    # per-pixel accumulator, one lane per output channel
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] accbuf = np.zeros(o, dtype=np.float64)

    cdef double[:, :, :, ::1] xv = xa
    cdef double[:, ::1] wv = wp
    cdef double[:, :, :, ::1] ov = out
    cdef double[::1] acc = accbuf

    cdef Py_ssize_t bi, i, j, cc, u, v, oc, k
    cdef double xval
    cdef const double* wrow
    with nogil:
        for bi in range(n):
            for i in range(oh):
                for j in range(ow):
                    for oc in range(o):
                        acc[oc] = 0.0
                    k = 0
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                xval = xv[bi, cc, i * stride + u, j * stride + v]
                                wrow = &wv[k, 0]
                                for oc in range(o):
                                    acc[oc] += xval * wrow[oc]
                                k += 1
                    for oc in range(o):
                        ov[bi, oc, i, j] = acc[oc]
    return out
