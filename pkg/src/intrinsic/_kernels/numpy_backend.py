"""Pure numpy convolution kernels.

All functions operate on float64 arrays that were already padded by the
caller; nothing here knows about padding policy. Layout is NCHW with a
weight layout of (out_channels, in_channels, kh, kw).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of ``xp`` as (N, C, Ho, Wo, kh, kw) sliding windows."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Correlate pre-padded ``xp`` (N,C,Hp,Wp) with ``w`` (O,C,kh,kw)."""
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    pt = _patches(xp, w.shape[2], w.shape[3], stride)
    return np.einsum("ncywij,ocij->noyw", pt, w, optimize=True)


def conv2d_grad_weight(
    gy: np.ndarray, xp: np.ndarray, stride: int, kh: int, kw: int
) -> np.ndarray:
    """Weight gradient for the correlation above; returns (O,C,kh,kw)."""
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    pt = _patches(xp, kh, kw, stride)
    return np.einsum("noyw,ncywij->ocij", gy, pt, optimize=True)


def conv2d_grad_input_padded(
    gy: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int
) -> np.ndarray:
    """Input gradient, scattered back onto the padded shape (N,C,Hp,Wp).

    Sliding windows overlap whenever stride < kernel size, so the
    gradient is accumulated one kernel offset at a time with strided
    slice assignment instead of a single strided view.
    """
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    n, _, ho, wo = gy.shape
    cin = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros((n, cin, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("noyw,oc->ncyw", gy, w[:, :, i, j], optimize=True)
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += contrib
    return gxp
