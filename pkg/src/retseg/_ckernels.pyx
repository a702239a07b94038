# cython: language_level=3
"""Compiled twins of the kernels in ``_pykernels``.

Direct loops over float64 memoryviews. Signatures and semantics match the
numpy versions exactly; results agree up to summation order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow, floor

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t n, Py_ssize_t nout) nogil:
    # one past the largest o < nout with o*stride + off < n
    cdef Py_ssize_t top = n - 1 - off
    if top < 0:
        return 0
    top = top // stride + 1
    return top if top < nout else nout


def conv2d_forward(x, w, int stride, int padding, int groups):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t Cout = wv.shape[0], Cg = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t Og = Cout // groups
    out = np.zeros((B, Cout, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, o, c, ci, i, j, y, xx, y0, y1, x0, x1, iy, ix0
    cdef double wt
    with nogil:
        for b in range(B):
            for o in range(Cout):
                for c in range(Cg):
                    ci = (o // Og) * Cg + c
                    for i in range(kh):
                        y0 = _lo(i - padding, stride)
                        y1 = _hi(i - padding, stride, H, Ho)
                        for j in range(kw):
                            wt = wv[o, c, i, j]
                            x0 = _lo(j - padding, stride)
                            x1 = _hi(j - padding, stride, W, Wo)
                            for y in range(y0, y1):
                                iy = y * stride + i - padding
                                ix0 = j - padding
                                for xx in range(x0, x1):
                                    ov[b, o, y, xx] += wt * xv[b, ci, iy, xx * stride + ix0]
    return out


def conv2d_backward_input(gy, w, x_shape, int stride, int padding, int groups):
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = x_shape[0], Cin = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Cout = wv.shape[0], Cg = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t Ho = gv.shape[2], Wo = gv.shape[3]
    cdef Py_ssize_t Og = Cout // groups
    gx = np.zeros((B, Cin, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = gx
    cdef Py_ssize_t b, o, c, ci, i, j, y, xx, y0, y1, x0, x1, iy, ix0
    cdef double wt
    with nogil:
        for b in range(B):
            for o in range(Cout):
                for c in range(Cg):
                    ci = (o // Og) * Cg + c
                    for i in range(kh):
                        y0 = _lo(i - padding, stride)
                        y1 = _hi(i - padding, stride, H, Ho)
                        for j in range(kw):
                            wt = wv[o, c, i, j]
                            x0 = _lo(j - padding, stride)
                            x1 = _hi(j - padding, stride, W, Wo)
                            for y in range(y0, y1):
                                iy = y * stride + i - padding
                                ix0 = j - padding
                                for xx in range(x0, x1):
                                    xv[b, ci, iy, xx * stride + ix0] += wt * gv[b, o, y, xx]
    return gx


def conv2d_backward_weight(x, gy, w_shape, int stride, int padding, int groups):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t Cout = w_shape[0], Cg = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t Ho = gv.shape[2], Wo = gv.shape[3]
    cdef Py_ssize_t Og = Cout // groups
    gw = np.zeros((Cout, Cg, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] wv = gw
    cdef Py_ssize_t b, o, c, ci, i, j, y, xx, y0, y1, x0, x1, iy, ix0
    cdef double acc
    with nogil:
        for o in range(Cout):
            for c in range(Cg):
                ci = (o // Og) * Cg + c
                for i in range(kh):
                    y0 = _lo(i - padding, stride)
                    y1 = _hi(i - padding, stride, H, Ho)
                    for j in range(kw):
                        x0 = _lo(j - padding, stride)
                        x1 = _hi(j - padding, stride, W, Wo)
                        acc = 0.0
                        for b in range(B):
                            for y in range(y0, y1):
                                iy = y * stride + i - padding
                                ix0 = j - padding
                                for xx in range(x0, x1):
                                    acc += gv[b, o, y, xx] * xv[b, ci, iy, xx * stride + ix0]
                        wv[o, c, i, j] = acc
    return gw


cdef void _axis_weights(Py_ssize_t n, Py_ssize_t[::1] i0, Py_ssize_t[::1] i1, double[::1] fr) nogil:
    cdef Py_ssize_t o
    cdef double src
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        if src < 0.0:
            src = 0.0
        i0[o] = <Py_ssize_t>floor(src)
        i1[o] = i0[o] + 1 if i0[o] + 1 < n else n - 1
        fr[o] = src - i0[o]


def upsample2x_forward(x):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    hi0 = np.empty(2 * H, dtype=np.intp); hi1 = np.empty(2 * H, dtype=np.intp); hf = np.empty(2 * H)
    wi0 = np.empty(2 * W, dtype=np.intp); wi1 = np.empty(2 * W, dtype=np.intp); wf = np.empty(2 * W)
    cdef Py_ssize_t[::1] a0 = hi0, a1 = hi1, b0 = wi0, b1 = wi1
    cdef double[::1] af = hf, bf = wf
    _axis_weights(H, a0, a1, af)
    _axis_weights(W, b0, b1, bf)
    out = np.empty((B, C, 2 * H, 2 * W), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, c, y, xx
    cdef double top, bot, fy, fx
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(2 * H):
                    fy = af[y]
                    for xx in range(2 * W):
                        fx = bf[xx]
                        top = (1.0 - fx) * xv[b, c, a0[y], b0[xx]] + fx * xv[b, c, a0[y], b1[xx]]
                        bot = (1.0 - fx) * xv[b, c, a1[y], b0[xx]] + fx * xv[b, c, a1[y], b1[xx]]
                        ov[b, c, y, xx] = (1.0 - fy) * top + fy * bot
    return out


def upsample2x_backward(gy):
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t B = gv.shape[0], C = gv.shape[1], H = gv.shape[2] // 2, W = gv.shape[3] // 2
    hi0 = np.empty(2 * H, dtype=np.intp); hi1 = np.empty(2 * H, dtype=np.intp); hf = np.empty(2 * H)
    wi0 = np.empty(2 * W, dtype=np.intp); wi1 = np.empty(2 * W, dtype=np.intp); wf = np.empty(2 * W)
    cdef Py_ssize_t[::1] a0 = hi0, a1 = hi1, b0 = wi0, b1 = wi1
    cdef double[::1] af = hf, bf = wf
    _axis_weights(H, a0, a1, af)
    _axis_weights(W, b0, b1, bf)
    gx = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = gx
    cdef Py_ssize_t b, c, y, xx
    cdef double g, fy, fx
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(2 * H):
                    fy = af[y]
                    for xx in range(2 * W):
                        fx = bf[xx]
                        g = gv[b, c, y, xx]
                        xv[b, c, a0[y], b0[xx]] += (1.0 - fy) * (1.0 - fx) * g
                        xv[b, c, a0[y], b1[xx]] += (1.0 - fy) * fx * g
                        xv[b, c, a1[y], b0[xx]] += fy * (1.0 - fx) * g
                        xv[b, c, a1[y], b1[xx]] += fy * fx * g
    return gx


def decay_mask(coords, double gamma):
    cdef const long long[:, ::1] cv = np.ascontiguousarray(coords, dtype=np.int64)
    cdef Py_ssize_t N = cv.shape[0]
    out = np.empty((N, N), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t n, m
    cdef long long dx, dy
    with nogil:
        for n in range(N):
            for m in range(N):
                dx = cv[n, 0] - cv[m, 0]
                dy = cv[n, 1] - cv[m, 1]
                if dx < 0:
                    dx = -dx
                if dy < 0:
                    dy = -dy
                ov[n, m] = pow(gamma, <double>(dx + dy))
    return out
