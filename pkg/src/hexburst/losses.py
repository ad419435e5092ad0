"""Reconstruction losses: L1 and a CIELAB colour-preserving L1."""

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, abs_, add, channels, clamp, concat, mean, mul, sub, unary

# linear sRGB -> XYZ, D65
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0
# white-normalised rows, written as b + c0 (r - b) + c1 (g - b): gray maps to X = Y = Z bit-exactly
_NORM = SRGB_TO_XYZ / D65_WHITE[:, None]


def _check(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"loss inputs differ in shape: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred, target):
    pred, target = _as(pred), _as(target)
    _check(pred, target)
    return mean(abs_(sub(pred, target)))


def _as(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _lab_f(t):
    d3 = _DELTA ** 3

    def fn(v):
        return np.where(v > d3, np.cbrt(np.maximum(v, d3)), v / (3 * _DELTA ** 2) + 4.0 / 29.0)

    def dfn(v):
        return np.where(v > d3, 1.0 / (3.0 * np.cbrt(np.maximum(v, d3)) ** 2), 1.0 / (3 * _DELTA ** 2))

    return unary(t, fn, dfn)


def rgb_to_lab(rgb):
    """(N, 3, H, W) linear RGB -> CIELAB (L* in [0, 100]); values clamped to [0, 1] first."""
    rgb = _as(rgb)
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ShapeError(f"rgb_to_lab expects (N, 3, H, W), got {tuple(rgb.shape)}")
    x = clamp(rgb, 0.0, 1.0)
    r, g, b = channels(x, 0, 1), channels(x, 1, 2), channels(x, 2, 3)
    rb, gb = sub(r, b), sub(g, b)
    fx, fy, fz = (_lab_f(add(b, add(mul(rb, _NORM[k, 0]), mul(gb, _NORM[k, 1])))) for k in range(3))
    L = sub(mul(fy, 116.0), 16.0)
    a = mul(sub(fx, fy), 500.0)
    bb = mul(sub(fy, fz), 200.0)
    return concat([L, a, bb], axis=1)


def cielab_loss(pred, target):
    pred, target = _as(pred), _as(target)
    _check(pred, target)
    return mean(abs_(sub(rgb_to_lab(pred), rgb_to_lab(target))))


def combined_loss(pred, target, w_l1=1.0, w_lab=0.0):
    """Returns ``(total, l1, lab)``; ``lab`` is None when its weight is zero."""
    l1 = l1_loss(pred, target)
    total = mul(l1, w_l1) if w_l1 != 1.0 else l1
    lab = None
    if w_lab:
        lab = cielab_loss(pred, target)
        total = add(total, mul(lab, w_lab))
    return total, l1, lab
