"""Frequency-axis correlation kernels, numpy implementation.

All three kernels operate on explicitly padded inputs with the layout
(batch, channel, frequency, time); padding is applied by the caller so the
compiled backend can share the exact same semantics (every kernel tap is
performed, including taps that land on padding zeros).
"""

import numpy as np


def corr_fwd(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Correlate ``xp`` (B, Ci, Fp, T) with ``w`` (Co, Ci, K) along frequency."""
    B, Ci, Fp, T = xp.shape
    Co, _, K = w.shape
    Fo = (Fp - K) // stride + 1
    out = np.zeros((B, Co, Fo, T))
    for k in range(K):
        xs = xp[:, :, k : k + (Fo - 1) * stride + 1 : stride, :]
        out += np.einsum("oi,bift->boft", w[:, :, k], xs, optimize=True)
    return out


def corr_grad_input(gy: np.ndarray, w: np.ndarray, stride: int, fp: int) -> np.ndarray:
    """Adjoint of ``corr_fwd`` w.r.t. the padded input; returns (B, Ci, fp, T)."""
    B, Co, Fo, T = gy.shape
    _, Ci, K = w.shape
    gx = np.zeros((B, Ci, fp, T))
    for k in range(K):
        gx[:, :, k : k + (Fo - 1) * stride + 1 : stride, :] += np.einsum(
            "oi,boft->bift", w[:, :, k], gy, optimize=True
        )
    return gx


def corr_grad_weight(xp: np.ndarray, gy: np.ndarray, stride: int) -> np.ndarray:
    """Adjoint of ``corr_fwd`` w.r.t. the kernel; returns (Co, Ci, K)."""
    B, Co, Fo, T = gy.shape
    _, Ci, Fp, T2 = xp.shape
    K = Fp - (Fo - 1) * stride
    gw = np.zeros((Co, Ci, K))
    for k in range(K):
        xs = xp[:, :, k : k + (Fo - 1) * stride + 1 : stride, :]
        gw[:, :, k] = np.einsum("bift,boft->oi", xs, gy, optimize=True)
    return gw
