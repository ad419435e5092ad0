"""Coarse-to-fine pyramid optical flow and its brute-force oracle.

Flow is estimated once on block-mean luminance (one value per 4x4 CFA
block, i.e. 1/4 of raw resolution). Convention: backward flow, so
``warp(other, flow) ~= ref`` and a frame whose content moved by (dx, dy)
has flow (dx, dy) everywhere.
"""

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ftr1, kernels
from .errors import FormatError, NumericalError, ShapeError
from .tensor import (
    AdamW, Tensor, add, bilinear_warp, charbonnier, concat, conv2d, mean, mul, relu,
    resize_bilinear,
)

log = logging.getLogger(__name__)

FLOW_SCALE = 0.25
STACK_CHANNELS = (8, 16, 16, 8, 2)
SMOOTH_WEIGHT = 0.1
CHARB_EPS = 1e-3


@dataclass
class FlowField:
    data: np.ndarray
    scale: float = FLOW_SCALE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ShapeError(f"flow must be 2xHxW, got {self.data.shape}")

    @property
    def hw(self):
        return self.data.shape[1:]

    @classmethod
    def constant(cls, dx, dy, hw, scale=FLOW_SCALE):
        d = np.empty((2,) + tuple(hw), dtype=np.float32)
        d[0], d[1] = dx, dy
        return cls(d, scale)


def raw_to_flowinput(raw):
    """Mean of every 4x4 block of a raw frame (a luminance proxy at 1/4 scale)."""
    v = np.asarray(getattr(raw, "values", raw), dtype=np.float64)
    b = 4
    H, W = v.shape
    if H % b or W % b:
        raise ShapeError(f"raw dims {(H, W)} not divisible by block size {b}")
    return v.reshape(H // b, b, W // b, b).mean(axis=(1, 3)).astype(np.float32)


_TENT = np.array([1.0, 2.0, 1.0]) / 4.0


def flow_luminance(x):
    """Separable [1,2,1]/4 filter over the last two axes.

    Block means alternate R/G/B with period 2; this filter has zero response
    at that frequency, so shifts by an odd number of blocks stay matchable.
    """
    x = np.asarray(x, dtype=np.float64)
    x = ndimage.convolve1d(x, _TENT, axis=-1, mode="nearest")
    return ndimage.convolve1d(x, _TENT, axis=-2, mode="nearest")


def block_match(ref, other, max_disp, radius=4):
    """Exhaustive SAD search over a (2r+1)^2 patch; returns an integer FlowField.

    Ties go to the smaller displacement, then lexicographic (dy, dx).
    """
    ref = np.asarray(ref)
    other = np.asarray(other)
    if ref.shape != other.shape or ref.ndim != 2:
        raise ShapeError(f"block_match needs equal 2-D inputs, got {ref.shape} and {other.shape}")
    if max_disp < 0:
        raise ShapeError("max_disp must be non-negative")
    return FlowField(kernels.block_match(ref, other, int(max_disp), int(radius)).astype(np.float32))


def oracle_flow(ref, other, max_disp, radius=4):
    """Block-match oracle on CFA flow inputs (colour carrier removed first)."""
    return block_match(flow_luminance(ref), flow_luminance(other), max_disp, radius)


def epe(flow, gt_flow, margin=0):
    """Mean endpoint error, ignoring a ``margin``-pixel border."""
    a = flow.data if isinstance(flow, FlowField) else np.asarray(flow)
    b = gt_flow.data if isinstance(gt_flow, FlowField) else np.asarray(gt_flow)
    if a.shape != b.shape:
        raise ShapeError(f"epe: flow {a.shape} vs ground truth {b.shape}")
    if isinstance(flow, FlowField) and isinstance(gt_flow, FlowField) and flow.scale != gt_flow.scale:
        raise ShapeError(f"epe: flow scales differ ({flow.scale} vs {gt_flow.scale})")
    H, W = a.shape[-2:]
    sl = (Ellipsis, slice(margin, H - margin), slice(margin, W - margin))
    d = a[sl].astype(np.float64) - b[sl]
    return float(np.sqrt(d[..., 0, :, :] ** 2 + d[..., 1, :, :] ** 2).mean())


def rescale_flow(flow, factor):
    """Resize a flow field by ``factor`` and scale its vectors by the same amount."""
    factor = Fraction(factor).limit_denominator(1 << 16)
    if factor <= 0:
        raise ShapeError("rescale factor must be positive")
    H, W = flow.hw
    h, w = H * factor, W * factor
    if h.denominator != 1 or w.denominator != 1:
        raise ShapeError(f"rescale by {factor} of {H}x{W} is not integral")
    f = float(factor)
    if factor == 1:
        return FlowField(flow.data.copy(), flow.scale)
    out = resize_bilinear(Tensor(flow.data[None].astype(np.float64)), (int(h), int(w))).data[0] * f
    return FlowField(out.astype(np.float32), flow.scale * f)


def rescale_flow_tensor(flow, hw):
    """Differentiable rescale of an (N, 2, H, W) flow tensor to spatial size ``hw``."""
    H, W = flow.shape[2:]
    if (H, W) == tuple(hw):
        return flow
    if hw[0] * W != hw[1] * H:
        raise ShapeError(f"anisotropic flow rescale {H}x{W} -> {hw}")
    return mul(resize_bilinear(flow, hw), hw[0] / H)


# ---------------------------------------------------------------- network

_BINOMIAL = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16.0


def gaussian_pyramid(img, levels):
    """Finest-first pyramid of an (..., H, W) array; binomial blur then decimate."""
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        p = pyr[-1]
        p = ndimage.convolve1d(p, _BINOMIAL, axis=-1, mode="nearest")
        p = ndimage.convolve1d(p, _BINOMIAL, axis=-2, mode="nearest")
        pyr.append(p[..., ::2, ::2])
    return pyr


def init_flownet(levels=3, seed=0, dtype=np.float32):
    """Per-level conv stacks; the last layer starts at zero so initial flow is zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for lev in range(levels):
        cin = 4
        for k, cout in enumerate(STACK_CHANNELS):
            last = k == len(STACK_CHANNELS) - 1
            fan_in = cin * 9
            w = np.zeros((cout, cin, 3, 3)) if last else rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
            params[f"level{lev}.conv{k}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
            params[f"level{lev}.conv{k}.bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
            cin = cout
    return params


def flownet_levels(params):
    return 1 + max(int(k.split(".")[0][len("level"):]) for k in params)


def _normalise_pair(ref, other):
    m = ref.mean(axis=(-2, -1), keepdims=True)
    s = ref.std(axis=(-2, -1), keepdims=True) + 1e-6
    return (ref - m) / s, (other - m) / s


def _stack(params, lev, x):
    n = len(STACK_CHANNELS)
    for k in range(n):
        x = conv2d(x, params[f"level{lev}.conv{k}.weight"], params[f"level{lev}.conv{k}.bias"], 1, 1)
        if k < n - 1:
            x = relu(x)
    return x


def flow_pyramid_forward(params, ref, other, levels=None):
    """Batched coarse-to-fine pass on (N, H, W) luminance arrays.

    Returns ``(flows, pyr_ref, pyr_other)`` with finest-first lists; each flow
    is an (N, 2, h, w) Tensor at its level's resolution.
    """
    levels = levels or flownet_levels(params)
    ref = np.asarray(ref, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if ref.shape != other.shape:
        raise ShapeError(f"flow inputs differ in shape: {ref.shape} vs {other.shape}")
    H, W = ref.shape[-2:]
    div = 2 ** (levels - 1)
    if H % div or W % div:
        raise ShapeError(f"flow input {H}x{W} not divisible by 2^(levels-1) = {div}")
    dtype = params["level0.conv0.weight"].dtype
    r, o = _normalise_pair(ref, other)
    r, o = flow_luminance(r), flow_luminance(o)
    pr = [p.astype(dtype)[:, None] for p in gaussian_pyramid(r, levels)]
    po = [p.astype(dtype)[:, None] for p in gaussian_pyramid(o, levels)]
    flows = [None] * levels
    flow = None
    for lev in range(levels - 1, -1, -1):
        N, _, h, w = pr[lev].shape
        if flow is None:
            up = Tensor(np.zeros((N, 2, h, w), dtype=dtype))
        else:
            up = rescale_flow_tensor(flow, (h, w))
        warped = bilinear_warp(Tensor(po[lev]), up)
        x = concat([Tensor(pr[lev]), warped, up], axis=1)
        flow = add(up, _stack(params, lev, x))
        flows[lev] = flow
    return flows, pr, po


def estimate_flow(ref, other, params, levels=None):
    """Flow from ``other`` to ``ref`` (2-D luminance arrays) as a FlowField."""
    flows, _, _ = flow_pyramid_forward(params, np.asarray(ref)[None], np.asarray(other)[None], levels)
    return FlowField(flows[0].data[0])


def estimate_flows(ref, others, params, levels=None):
    """Flows for several non-reference frames against one reference."""
    if not len(others):
        return []
    others = np.stack([np.asarray(o) for o in others])
    refs = np.broadcast_to(np.asarray(ref), others.shape)
    flows, _, _ = flow_pyramid_forward(params, refs, others, levels)
    return [FlowField(f) for f in flows[0].data]


# ---------------------------------------------------------------- unsupervised training

def _diff_kernels(dtype):
    kx = np.zeros((2, 2, 1, 2))
    ky = np.zeros((2, 2, 2, 1))
    for c in range(2):
        kx[c, c, 0] = (-1.0, 1.0)
        ky[c, c, :, 0] = (-1.0, 1.0)
    return Tensor(kx, dtype=dtype), Tensor(ky, dtype=dtype)


def photometric_loss(flows, pyr_ref, pyr_other, smooth_weight=SMOOTH_WEIGHT, eps=CHARB_EPS):
    """Charbonnier photometric error plus first-order smoothness, averaged over levels.

    Pixels whose sample point leaves the image are masked out.
    """
    total = None
    for flow, r, o in zip(flows, pyr_ref, pyr_other):
        N, _, h, w = r.shape
        warped = bilinear_warp(Tensor(o), flow)
        fx = flow.data[:, 0] + np.arange(w)[None, None, :]
        fy = flow.data[:, 1] + np.arange(h)[None, :, None]
        valid = ((fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)).astype(r.dtype)[:, None]
        scale = valid.size / max(valid.sum(), 1.0)
        photo = mul(mean(mul(charbonnier(warped - Tensor(r), eps), Tensor(valid))), scale)
        kx, ky = _diff_kernels(r.dtype)
        smooth = add(mean(charbonnier(conv2d(flow, kx), eps)), mean(charbonnier(conv2d(flow, ky), eps)))
        term = add(photo, mul(smooth, smooth_weight))
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(flows))


def flow_pairs(bursts):
    """(ref, other, true_flow) triples at flow scale from each burst's frames."""
    pairs = []
    for b in bursts:
        ref = raw_to_flowinput(b.frames[0])
        for i in range(1, len(b.frames)):
            dx, dy = np.asarray(b.shifts[i]) * FLOW_SCALE
            pairs.append((ref, raw_to_flowinput(b.frames[i]), (float(dx), float(dy))))
    return pairs


def copy_params(params):
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def cosine_lr(lr, step, steps):
    return lr * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))


def photometric_finetune(params, pairs, steps, lr=5e-3, batch=8, seed=0, weight_decay=0.0,
                         on_step=None):
    """Fine-tune flow params on (ref, other) luminance pairs without flow labels.

    ``pairs`` items are ``(ref, other)`` or ``(ref, other, anything)``; only the
    images are used. The learning rate follows a cosine decay to zero.
    Returns ``(params, losses)``. On a non-finite loss the last good params
    are restored and NumericalError is raised with them attached.
    """
    if not pairs:
        raise ShapeError("photometric_finetune needs a non-empty dataset")
    params = copy_params(params)
    if steps <= 0:
        return params, []
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    losses = []
    good = {k: v.data.copy() for k, v in params.items()}
    for step in range(steps):
        opt.state.lr = cosine_lr(lr, step, steps)
        idx = rng.choice(len(pairs), size=min(batch, len(pairs)), replace=False)
        ref = np.stack([pairs[i][0] for i in idx])
        oth = np.stack([pairs[i][1] for i in idx])
        flows, pr, po = flow_pyramid_forward(params, ref, oth)
        loss = photometric_loss(flows, pr, po)
        value = float(loss.data)
        if not np.isfinite(value):
            for k, v in params.items():
                v.data[...] = good[k]
            err = NumericalError(f"flow fine-tuning diverged at step {step}")
            err.params = params
            raise err
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if (step + 1) % 50 == 0:
            good = {k: v.data.copy() for k, v in params.items()}
        if on_step is not None:
            on_step(step, value)
    return params, losses


def save_flownet(directory, params, extra=None):
    """``<name>.ftr`` per tensor plus flownet.json in ``directory``."""
    d = Path(directory)
    for name, t in params.items():
        ftr1.save(d / f"{name}.ftr", t.data)
    meta = {"params": {k: list(v.shape) for k, v in params.items()}, "levels": flownet_levels(params)}
    meta.update(extra or {})
    ftr1.atomic_write_text(d / "flownet.json", json.dumps(meta, indent=1, sort_keys=True))
    return d


def load_flownet(directory, dtype=np.float32):
    d = Path(directory)
    if not (d / "flownet.json").exists():
        raise FormatError(f"{d} holds no flow network (missing flownet.json)")
    meta = json.loads((d / "flownet.json").read_text())
    params = {}
    for name, shape in meta["params"].items():
        arr = ftr1.load(d / f"{name}.ftr")
        if list(arr.shape) != list(shape):
            raise FormatError(f"flow parameter {name}: file shape {arr.shape} != recorded {shape}")
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return params
