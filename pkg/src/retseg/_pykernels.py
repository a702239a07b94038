"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are float64 C-contiguous arrays; shape validation happens one level
up in :mod:`retseg.tensor`.
"""
from __future__ import annotations

import numpy as np


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, stride, padding, groups):
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    Ho = _out_size(H, kh, stride, padding)
    Wo = _out_size(W, kw, stride, padding)
    G = groups
    Og = Cout // G
    xp = _pad(x, padding).reshape(B, G, Cg, H + 2 * padding, W + 2 * padding)
    wg = w.reshape(G, Og, Cg, kh, kw)
    out = np.zeros((B, G, Og, Ho, Wo))
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, :, i:i + hs:stride, j:j + ws:stride]
            out += np.einsum("bgchw,goc->bgohw", xs, wg[:, :, :, i, j], optimize=True)
    return out.reshape(B, Cout, Ho, Wo)


def conv2d_backward_input(gy, w, x_shape, stride, padding, groups):
    B, Cin, H, W = x_shape
    Cout, Cg, kh, kw = w.shape
    _, _, Ho, Wo = gy.shape
    G = groups
    Og = Cout // G
    gyg = gy.reshape(B, G, Og, Ho, Wo)
    wg = w.reshape(G, Og, Cg, kh, kw)
    gxp = np.zeros((B, G, Cg, H + 2 * padding, W + 2 * padding))
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, :, i:i + hs:stride, j:j + ws:stride] += np.einsum(
                "bgohw,goc->bgchw", gyg, wg[:, :, :, i, j], optimize=True
            )
    gxp = gxp.reshape(B, Cin, H + 2 * padding, W + 2 * padding)
    if padding:
        gxp = gxp[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(gxp)


def conv2d_backward_weight(x, gy, w_shape, stride, padding, groups):
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w_shape
    _, _, Ho, Wo = gy.shape
    G = groups
    Og = Cout // G
    xp = _pad(x, padding).reshape(B, G, Cg, H + 2 * padding, W + 2 * padding)
    gyg = gy.reshape(B, G, Og, Ho, Wo)
    gw = np.zeros((G, Og, Cg, kh, kw))
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, :, i:i + hs:stride, j:j + ws:stride]
            gw[:, :, :, i, j] = np.einsum("bgchw,bgohw->goc", xs, gyg, optimize=True)
    return gw.reshape(Cout, Cg, kh, kw)


def upsample_matrix(n: int) -> np.ndarray:
    """Dense (2n, n) interpolation matrix for half-pixel x2 bilinear resize."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample2x_forward(x):
    B, C, H, W = x.shape
    uh = upsample_matrix(H)
    uw = upsample_matrix(W)
    return np.ascontiguousarray(np.einsum("oh,bchw,pw->bcop", uh, x, uw, optimize=True))


def upsample2x_backward(gy):
    B, C, H2, W2 = gy.shape
    uh = upsample_matrix(H2 // 2)
    uw = upsample_matrix(W2 // 2)
    return np.ascontiguousarray(np.einsum("oh,bcop,pw->bchw", uh, gy, uw, optimize=True))


def decay_mask(coords, gamma):
    c = np.asarray(coords, dtype=np.int64)
    dist = np.abs(c[:, None, 0] - c[None, :, 0]) + np.abs(c[:, None, 1] - c[None, :, 1])
    return np.power(float(gamma), dist.astype(np.float64))
