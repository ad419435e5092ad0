"""Differentiable operations on :class:`Tensor`.

Images are NCHW. Convolution is cross-correlation (no kernel flip).
"""

import numpy as np

from .. import kernels
from ..errors import ShapeError
from .core import Tensor, as_tensor, make_result


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _coerce(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out.astype(a.dtype, copy=False), (a, b), bw)


def sub(a, b):
    a, b = _coerce(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out.astype(a.dtype, copy=False), (a, b), bw)


def mul(a, b):
    a, b = _coerce(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out.astype(a.dtype, copy=False), (a, b), bw)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * mask,))


def abs_(x):
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,))


def clamp(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return make_result(out, (x,), lambda g: (g * inside,))


def charbonnier(x, eps=1e-3):
    """sqrt(x^2 + eps^2), a smooth L1."""
    r = np.sqrt(x.data * x.data + eps * eps)
    return make_result(r, (x,), lambda g: (g * x.data / r,))


def unary(x, fn, dfn):
    """Elementwise op from a value function and its derivative."""
    out = fn(x.data).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * dfn(x.data),))


# ---------------------------------------------------------------- reductions

def sum_(x):
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x):
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {t.shape} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_result(out, tensors, bw)


def channels(x, start, stop):
    """Slice ``x[:, start:stop]``."""
    out = x.data[:, start:stop].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_result(out, (x,), bw)


def split_batch(x, sizes):
    """Split along the batch axis into consecutive chunks."""
    outs, start = [], 0
    for n in sizes:
        outs.append(_batch_slice(x, start, start + n))
        start += n
    return outs


def _batch_slice(x, start, stop):
    out = x.data[start:stop]

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return make_result(out, (x,), bw)


def space_to_depth(x, r):
    N, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeError(f"space_to_depth: spatial dims {(H, W)} not divisible by {r}")
    return make_result(_s2d(x.data, r), (x,), lambda g: (_d2s(g, r),))


def pixel_shuffle(x, r):
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r); channel c*r*r + dy*r + dx -> (c, dy, dx)."""
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: channels of {x.shape} not divisible by r^2={r * r}")
    return make_result(_d2s(x.data, r), (x,), lambda g: (_s2d(g, r),))


def _d2s(a, r):
    N, Cr, H, W = a.shape
    C = Cr // (r * r)
    return a.reshape(N, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H * r, W * r)


def _s2d(a, r):
    N, C, H, W = a.shape
    return a.reshape(N, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(
        N, C * r * r, H // r, W // r)


# ---------------------------------------------------------------- convolution

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW ``x`` with OIKhKw ``weight``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, I, kh, kw = weight.shape
    if C != I:
        raise ShapeError(f"conv2d: input {x.shape} has {C} channels but weight {weight.shape} expects {I}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(H + 2 * ph, W + 2 * pw)}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    xd = x.data
    wmat = weight.data.reshape(O, -1)

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, C)
        padded_shape = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        padded_shape = xp.shape
        cols = kernels.im2col(xp, kh, kw, sh, sw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if padded_shape is None:
                gx = np.ascontiguousarray(gcols.reshape(N, H, W, C).transpose(0, 3, 1, 2))
            else:
                gxp = kernels.col2im(gcols, padded_shape, kh, kw, sh, sw)
                gx = np.ascontiguousarray(gxp[:, :, ph:ph + H, pw:pw + W])
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw)


# ---------------------------------------------------------------- resampling

def bilinear_warp(x, flow):
    """out(p) = x sampled bilinearly at p + flow(p); borders replicate.

    ``flow`` is (N, 2, H, W) with channel 0 = dx, channel 1 = dy.
    """
    x = as_tensor(x)
    flow = as_tensor(flow, dtype=x.dtype)
    if x.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"bilinear_warp expects NCHW input and N2HW flow, got {x.shape} and {flow.shape}")
    if flow.shape[0] != x.shape[0] or flow.shape[2:] != x.shape[2:]:
        raise ShapeError(f"bilinear_warp: flow {flow.shape} does not match input {x.shape}")
    xd = np.ascontiguousarray(x.data)
    fd = np.ascontiguousarray(flow.data, dtype=xd.dtype)
    out = kernels.warp_forward(xd, fd)

    def bw(g):
        gx, gf = kernels.warp_backward(xd, fd, np.ascontiguousarray(g, dtype=xd.dtype))
        return gx, gf

    return make_result(out, (x, flow), bw)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic linear interpolation matrix with half-pixel centres."""
    A = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = min(int(np.floor(src)), max(n_in - 2, 0))
        w = src - i0
        A[i, i0] += 1.0 - w
        if w > 0:
            A[i, min(i0 + 1, n_in - 1)] += w
    return A.astype(dtype)


def resize_bilinear(x, out_hw):
    """Separable bilinear resize of an NCHW tensor to ``out_hw``."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    h, w = out_hw
    Ah = interp_matrix(H, h, x.dtype)
    Aw = interp_matrix(W, w, x.dtype)
    out = np.matmul(Ah, np.matmul(x.data, Aw.T))

    def bw(g):
        return (np.matmul(Ah.T, np.matmul(g, Aw)).astype(x.dtype, copy=False),)

    return make_result(out.astype(x.dtype, copy=False), (x,), bw)


# ---------------------------------------------------------------- blocks

def residual_block(x, w1, b1, w2, b2):
    """x + conv2(relu(conv1(x))), 3x3 kernels, stride 1, pad 1."""
    C = x.shape[1]
    if w1.shape[:2] != (C, C) or w2.shape[:2] != (C, C):
        raise ShapeError(
            f"residual_block: conv weights {w1.shape}, {w2.shape} must preserve {C} channels")
    h = relu(conv2d(x, w1, b1, 1, 1))
    return add(x, conv2d(h, w2, b2, 1, 1))
