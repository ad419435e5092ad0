# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: bilinear warp (forward/backward), block-matching SAD
search, and im2col/col2im. Mirrors ``_kernels_py`` exactly in semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY

cnp.import_array()

IMPL = "cython"

ctypedef fused real:
    float
    double


cdef inline void _coord(real v, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                        real* w, real* m) noexcept nogil:
    if v >= 0 and v <= n - 1:
        m[0] = 1
    else:
        m[0] = 0
    if v < 0:
        v = 0
    elif v > n - 1:
        v = n - 1
    cdef Py_ssize_t a = <Py_ssize_t>floor(v)
    if a > n - 2:
        a = n - 2 if n >= 2 else 0
    i0[0] = a
    i1[0] = a + 1 if a + 1 <= n - 1 else n - 1
    w[0] = v - a


def _warp_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] flow, real[:, :, :, ::1] out):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, i, j, x0, x1, y0, y1
    cdef real wx, wy, mx, my
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    _coord(j + flow[n, 0, i, j], W, &x0, &x1, &wx, &mx)
                    _coord(i + flow[n, 1, i, j], H, &y0, &y1, &wy, &my)
                    for c in range(C):
                        out[n, c, i, j] = ((1 - wy) * (1 - wx) * x[n, c, y0, x0]
                                           + (1 - wy) * wx * x[n, c, y0, x1]
                                           + wy * (1 - wx) * x[n, c, y1, x0]
                                           + wy * wx * x[n, c, y1, x1])


def _warp_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] flow, real[:, :, :, ::1] g,
                   real[:, :, :, ::1] gx, real[:, :, :, ::1] gflow):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, i, j, x0, x1, y0, y1
    cdef real wx, wy, mx, my, gv, v00, v01, v10, v11, sx, sy
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    _coord(j + flow[n, 0, i, j], W, &x0, &x1, &wx, &mx)
                    _coord(i + flow[n, 1, i, j], H, &y0, &y1, &wy, &my)
                    sx = 0
                    sy = 0
                    for c in range(C):
                        gv = g[n, c, i, j]
                        v00 = x[n, c, y0, x0]
                        v01 = x[n, c, y0, x1]
                        v10 = x[n, c, y1, x0]
                        v11 = x[n, c, y1, x1]
                        sx = sx + gv * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
                        sy = sy + gv * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
                        gx[n, c, y0, x0] += gv * (1 - wy) * (1 - wx)
                        gx[n, c, y0, x1] += gv * (1 - wy) * wx
                        gx[n, c, y1, x0] += gv * wy * (1 - wx)
                        gx[n, c, y1, x1] += gv * wy * wx
                    gflow[n, 0, i, j] = sx * mx
                    gflow[n, 1, i, j] = sy * my


def warp_forward(x, flow):
    x = np.ascontiguousarray(x)
    flow = np.ascontiguousarray(flow, dtype=x.dtype)
    out = np.empty_like(x)
    _warp_forward(x, flow, out)
    return out


def warp_backward(x, flow, gout):
    x = np.ascontiguousarray(x)
    flow = np.ascontiguousarray(flow, dtype=x.dtype)
    gout = np.ascontiguousarray(gout, dtype=x.dtype)
    gx = np.zeros_like(x)
    gflow = np.empty((x.shape[0], 2, x.shape[2], x.shape[3]), dtype=x.dtype)
    _warp_backward(x, flow, gout, gx, gflow)
    return gx, gflow


def candidate_order(max_disp):
    r = range(-max_disp, max_disp + 1)
    cands = [(dy, dx) for dy in r for dx in r]
    cands.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return np.asarray(cands, dtype=np.int64).reshape(-1, 2)


def block_match(ref, other, int max_disp, int radius=4):
    cdef double[:, ::1] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef double[:, ::1] o = np.ascontiguousarray(other, dtype=np.float64)
    cdef Py_ssize_t H = r.shape[0], W = r.shape[1]
    cdef long long[:, ::1] cands = candidate_order(max_disp)
    cdef Py_ssize_t K = cands.shape[0], P = 2 * radius + 1
    diff_arr = np.zeros((H + 2 * radius, W + 2 * radius))
    hsum_arr = np.zeros((H + 2 * radius, W))
    best_arr = np.full((H, W), np.inf)
    flow_arr = np.zeros((2, H, W), dtype=np.int64)
    cdef double[:, ::1] diff = diff_arr
    cdef double[:, ::1] hsum = hsum_arr
    cdef double[:, ::1] best = best_arr
    cdef long long[:, :, ::1] flow = flow_arr
    cdef Py_ssize_t k, i, j, t, si, sj
    cdef long long dy, dx
    cdef double s
    with nogil:
        for k in range(K):
            dy = cands[k, 0]
            dx = cands[k, 1]
            for i in range(H):
                si = i + dy
                if si < 0:
                    si = 0
                elif si > H - 1:
                    si = H - 1
                for j in range(W):
                    sj = j + dx
                    if sj < 0:
                        sj = 0
                    elif sj > W - 1:
                        sj = W - 1
                    diff[i + radius, j + radius] = fabs(r[i, j] - o[si, sj])
            for i in range(H + 2 * radius):
                for j in range(W):
                    s = diff[i, j]
                    for t in range(1, P):
                        s = s + diff[i, j + t]
                    hsum[i, j] = s
            for i in range(H):
                for j in range(W):
                    s = hsum[i, j]
                    for t in range(1, P):
                        s = s + hsum[i + t, j]
                    if s < best[i, j]:
                        best[i, j] = s
                        flow[0, i, j] = dx
                        flow[1, i, j] = dy
    return flow_arr


def _im2col(real[:, :, :, ::1] xp, real[:, ::1] cols, int kh, int kw, int sh, int sw,
            Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t n, c, oy, ox, ky, kx, row, col
    with nogil:
        for n in range(N):
            for oy in range(Ho):
                for ox in range(Wo):
                    row = (n * Ho + oy) * Wo + ox
                    col = 0
                    for c in range(C):
                        for ky in range(kh):
                            for kx in range(kw):
                                cols[row, col] = xp[n, c, oy * sh + ky, ox * sw + kx]
                                col = col + 1


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int sh, int sw,
            Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t n, c, oy, ox, ky, kx, row, col
    with nogil:
        for n in range(N):
            for oy in range(Ho):
                for ox in range(Wo):
                    row = (n * Ho + oy) * Wo + ox
                    col = 0
                    for c in range(C):
                        for ky in range(kh):
                            for kx in range(kw):
                                out[n, c, oy * sh + ky, ox * sw + kx] += cols[row, col]
                                col = col + 1


def im2col(xp, int kh, int kw, int sh, int sw):
    xp = np.ascontiguousarray(xp)
    N, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    cols = np.empty((N * Ho * Wo, C * kh * kw), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, sh, sw, Ho, Wo)
    return cols


def col2im(cols, shape, int kh, int kw, int sh, int sw):
    cols = np.ascontiguousarray(cols)
    N, C, Hp, Wp = shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, out, kh, kw, sh, sw, Ho, Wo)
    return out
