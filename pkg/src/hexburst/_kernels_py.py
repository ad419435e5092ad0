"""Pure-numpy reference kernels.

Same signatures and results as the compiled ``_kernels`` extension. Block
matching uses the same summation order as the compiled path, so the two agree
bit for bit.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IMPL = "python"


def _sample_grid(flow, H, W, dtype):
    X = np.arange(W, dtype=dtype)[None, None, :] + flow[:, 0].astype(dtype, copy=False)
    Y = np.arange(H, dtype=dtype)[None, :, None] + flow[:, 1].astype(dtype, copy=False)
    mx = ((X >= 0) & (X <= W - 1)).astype(dtype)
    my = ((Y >= 0) & (Y <= H - 1)).astype(dtype)
    X = np.clip(X, 0, W - 1)
    Y = np.clip(Y, 0, H - 1)
    x0 = np.minimum(np.floor(X).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(Y).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = X - x0
    wy = Y - y0
    return x0, x1, y0, y1, wx, wy, mx, my


def _corners(x, x0, x1, y0, y1):
    N, C, H, W = x.shape
    flat = x.reshape(N, C, H * W)

    def take(yy, xx):
        idx = (yy * W + xx).reshape(N, 1, H * W)
        return np.take_along_axis(flat, idx, axis=2).reshape(N, C, H, W)

    return take(y0, x0), take(y0, x1), take(y1, x0), take(y1, x1)


def warp_forward(x, flow):
    N, C, H, W = x.shape
    x0, x1, y0, y1, wx, wy, _, _ = _sample_grid(flow, H, W, x.dtype)
    v00, v01, v10, v11 = _corners(x, x0, x1, y0, y1)
    wx = wx[:, None]
    wy = wy[:, None]
    return ((1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01
            + wy * (1 - wx) * v10 + wy * wx * v11).astype(x.dtype, copy=False)


def warp_backward(x, flow, gout):
    N, C, H, W = x.shape
    x0, x1, y0, y1, wx, wy, mx, my = _sample_grid(flow, H, W, x.dtype)
    v00, v01, v10, v11 = _corners(x, x0, x1, y0, y1)
    wxe = wx[:, None]
    wye = wy[:, None]

    gflow = np.empty((N, 2, H, W), dtype=x.dtype)
    dX = (1 - wye) * (v01 - v00) + wye * (v11 - v10)
    dY = (1 - wxe) * (v10 - v00) + wxe * (v11 - v01)
    gflow[:, 0] = (gout * dX).sum(axis=1) * mx
    gflow[:, 1] = (gout * dY).sum(axis=1) * my

    HW = H * W
    base = (np.arange(N * C, dtype=np.intp) * HW).reshape(N, C, 1)
    idx, wts = [], []
    for yy, xx, w in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                      (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
        idx.append((base + (yy * W + xx).reshape(N, 1, HW)).ravel())
        wts.append((gout.reshape(N, C, HW) * w.reshape(N, 1, HW)).ravel())
    gx = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=N * C * HW)
    return gx.reshape(N, C, H, W).astype(x.dtype), gflow


def candidate_order(max_disp):
    """Displacements sorted by (|d|^2, dy, dx): the first strict minimum wins ties."""
    r = range(-max_disp, max_disp + 1)
    cands = [(dy, dx) for dy in r for dx in r]
    cands.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return np.asarray(cands, dtype=np.int64).reshape(-1, 2)


def block_match(ref, other, max_disp, radius=4):
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    other = np.ascontiguousarray(other, dtype=np.float64)
    H, W = ref.shape
    rows = np.arange(H)
    cols = np.arange(W)
    best = np.full((H, W), np.inf)
    flow = np.zeros((2, H, W), dtype=np.int64)
    diff = np.zeros((H + 2 * radius, W + 2 * radius))
    for dy, dx in candidate_order(max_disp):
        sy = np.clip(rows + dy, 0, H - 1)
        sx = np.clip(cols + dx, 0, W - 1)
        diff[radius:radius + H, radius:radius + W] = np.abs(ref - other[sy][:, sx])
        hsum = diff[:, 0:W].copy()
        for k in range(1, 2 * radius + 1):
            hsum += diff[:, k:k + W]
        sad = hsum[0:H].copy()
        for k in range(1, 2 * radius + 1):
            sad += hsum[k:k + H]
        better = sad < best
        best[better] = sad[better]
        flow[0][better] = dx
        flow[1][better] = dy
    return flow


def im2col(xp, kh, kw, sh, sw):
    N, C, Hp, Wp = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(N * Ho * Wo, C * kh * kw)


def col2im(cols, shape, kh, kw, sh, sw):
    N, C, Hp, Wp = shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    d = cols.reshape(N, Ho, Wo, C, kh, kw)
    out = np.zeros(shape, dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky:ky + sh * (Ho - 1) + 1:sh, kx:kx + sw * (Wo - 1) + 1:sw] += \
                d[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return out
