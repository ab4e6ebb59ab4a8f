# cython: boundscheck=False, wraparound=False, cdivision=True
"""Frequency-axis correlation kernels, compiled fast path.

Same contract as ``py_kernels``: inputs are already padded, layout
(batch, channel, frequency, time), float64 C-contiguous.
"""

import numpy as np


def corr_fwd(const double[:, :, :, ::1] xp, const double[:, :, ::1] w, int stride):
    cdef Py_ssize_t B = xp.shape[0], Ci = xp.shape[1], Fp = xp.shape[2], T = xp.shape[3]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Fo = (Fp - K) // stride + 1
    out_arr = np.zeros((B, Co, Fo, T))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, co, ci, fo, k, t, fi
    cdef double coeff
    with nogil:
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for k in range(K):
                        coeff = w[co, ci, k]
                        if coeff == 0.0:
                            continue
                        for fo in range(Fo):
                            fi = fo * stride + k
                            for t in range(T):
                                out[b, co, fo, t] += coeff * xp[b, ci, fi, t]
    return out_arr


def corr_grad_input(const double[:, :, :, ::1] gy, const double[:, :, ::1] w,
                    int stride, Py_ssize_t fp):
    cdef Py_ssize_t B = gy.shape[0], Co = gy.shape[1], Fo = gy.shape[2], T = gy.shape[3]
    cdef Py_ssize_t Ci = w.shape[1], K = w.shape[2]
    gx_arr = np.zeros((B, Ci, fp, T))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, co, ci, fo, k, t, fi
    cdef double coeff
    with nogil:
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for k in range(K):
                        coeff = w[co, ci, k]
                        if coeff == 0.0:
                            continue
                        for fo in range(Fo):
                            fi = fo * stride + k
                            for t in range(T):
                                gx[b, ci, fi, t] += coeff * gy[b, co, fo, t]
    return gx_arr


def corr_grad_weight(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] gy,
                     int stride):
    cdef Py_ssize_t B = xp.shape[0], Ci = xp.shape[1], Fp = xp.shape[2], T = xp.shape[3]
    cdef Py_ssize_t Co = gy.shape[1], Fo = gy.shape[2]
    cdef Py_ssize_t K = Fp - (Fo - 1) * stride
    gw_arr = np.zeros((Co, Ci, K))
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, co, ci, fo, k, t, fi
    cdef double acc
    with nogil:
        for co in range(Co):
            for ci in range(Ci):
                for k in range(K):
                    acc = 0.0
                    for b in range(B):
                        for fo in range(Fo):
                            fi = fo * stride + k
                            for t in range(T):
                                acc += xp[b, ci, fi, t] * gy[b, co, fo, t]
                    gw[co, ci, k] = acc
    return gw_arr
