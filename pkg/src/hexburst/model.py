"""Latent-domain burst reconstruction network.

preprocess (4x4/s4 conv, one output per CFA block) -> twin encoders (reference
and non-reference, disjoint weights) producing a latent pyramid at H/4, H/8,
H/16 -> per-level warp of non-reference features by rescaled flow, concat,
1x1 fusion -> UNet-style decoder from the deepest level -> three x2
pixel-shuffle stages and a 3x3 conv to RGB at 2H x 2W.

Parameter names are flat strings; tensors live in a plain dict.
"""

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ftr1
from .errors import ConfigError, FormatError, ShapeError, StageError
from .tensor import (
    Tensor, concat, conv2d, pixel_shuffle, relu, reshape, residual_block, split_batch,
)
from .pyrflow import rescale_flow_tensor


@dataclass(frozen=True)
class ModelConfig:
    enc_dim: tuple = (32, 64, 128)
    dec_dim: tuple = (256, 128, 64)
    enc_nb: tuple = (2, 4, 8)
    dec_nb: tuple = (2, 4, 8)
    num_nonref: int = 3
    sr_scale: int = 2

    def __post_init__(self):
        L = len(self.enc_dim)
        if not (len(self.dec_dim) == len(self.enc_nb) == len(self.dec_nb) == L) or L < 1:
            raise ConfigError("enc_dim, dec_dim, enc_nb and dec_nb must all have length L >= 1")
        if min(self.enc_dim + self.dec_dim + self.enc_nb + self.dec_nb) <= 0:
            raise ConfigError("channel and residual-block counts must be positive")
        if self.num_nonref < 0:
            raise ConfigError("num_nonref must be non-negative")
        if self.sr_scale != 2:
            raise ConfigError("only x2 super-resolution is supported")

    @property
    def depth(self):
        return len(self.enc_dim)

    @property
    def input_multiple(self):
        return 4 * 2 ** (self.depth - 1)

    def to_json(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


PRESETS = {
    "S": ModelConfig(),
    "L": ModelConfig(enc_dim=(64, 128, 512), dec_dim=(512, 128, 64), enc_nb=(4, 8, 16), dec_nb=(4, 8, 16)),
    "tiny": ModelConfig(enc_dim=(8, 16, 32), dec_dim=(32, 16, 8), enc_nb=(1, 2, 2), dec_nb=(1, 2, 2)),
    "tiny-L": ModelConfig(enc_dim=(16, 32, 48), dec_dim=(48, 32, 16), enc_nb=(2, 2, 3), dec_nb=(2, 2, 3)),
    "micro": ModelConfig(enc_dim=(4, 8), dec_dim=(8, 4), enc_nb=(1, 1), dec_nb=(1, 1)),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    if overrides:
        cfg = ModelConfig(**{**asdict(cfg), **overrides})
    return cfg


# ---------------------------------------------------------------- parameters

def _rb_shapes(prefix, C, nb, out):
    for k in range(nb):
        for j in (1, 2):
            out[f"{prefix}.rb{k}.conv{j}.weight"] = (C, C, 3, 3)
            out[f"{prefix}.rb{k}.conv{j}.bias"] = (C,)


def param_shapes(cfg):
    L = cfg.depth
    e, d = cfg.enc_dim, cfg.dec_dim
    s = {"pre.weight": (e[0], 1, 4, 4), "pre.bias": (e[0],)}
    for role in ("ref", "nonref"):
        for lev in range(L):
            _rb_shapes(f"enc.{role}.l{lev}", e[lev], cfg.enc_nb[lev], s)
            if lev < L - 1:
                s[f"enc.{role}.down{lev}.weight"] = (e[lev + 1], e[lev], 2, 2)
                s[f"enc.{role}.down{lev}.bias"] = (e[lev + 1],)
    for lev in range(L):
        s[f"fuse.l{lev}.weight"] = (d[L - 1 - lev], (cfg.num_nonref + 1) * e[lev], 1, 1)
        s[f"fuse.l{lev}.bias"] = (d[L - 1 - lev],)
    for k in range(L):
        _rb_shapes(f"dec.s{k}", d[k], cfg.dec_nb[k], s)
        if k < L - 1:
            s[f"dec.up{k}.weight"] = (4 * d[k + 1], d[k], 3, 3)
            s[f"dec.up{k}.bias"] = (4 * d[k + 1],)
            s[f"dec.merge{k}.weight"] = (d[k + 1], 2 * d[k + 1], 1, 1)
            s[f"dec.merge{k}.bias"] = (d[k + 1],)
    C = d[L - 1]
    for k in range(3):
        s[f"head.up{k}.weight"] = (4 * C, C, 3, 3)
        s[f"head.up{k}.bias"] = (4 * C,)
    s["head.out.weight"] = (3, C, 3, 3)
    s["head.out.bias"] = (3,)
    return s


def param_count(cfg_or_params):
    """Number of scalars in a config's parameters, or in a name -> tensor/shape dict."""
    if isinstance(cfg_or_params, ModelConfig):
        shapes = param_shapes(cfg_or_params).values()
    else:
        shapes = (getattr(v, "shape", v) for v in cfg_or_params.values())
    return int(sum(int(np.prod(s)) for s in shapes))


HEAD_OUT_GAIN = 0.05


def init_params(cfg, seed=0, dtype=np.float32, zero_residual=True, head_gain=HEAD_OUT_GAIN):
    """Kaiming fan-in init, zero biases; second conv of each residual block
    zero when ``zero_residual`` (each block starts as the identity).

    The final RGB conv is scaled by ``head_gain``: at plain Kaiming scale the
    untrained output has std ~2.5 against targets of std ~0.1, and the first
    few hundred steps go to shrinking it.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif zero_residual and ".rb" in name and name.endswith("conv2.weight"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name == "head.out.weight":
                arr *= head_gain
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return params


def copy_params(params):
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def symmetrize_fusion(params, cfg):
    """Make every non-reference slot of each fusion conv share slot 1's weights."""
    for lev in range(cfg.depth):
        w = params[f"fuse.l{lev}.weight"].data
        C = cfg.enc_dim[lev]
        for i in range(2, cfg.num_nonref + 1):
            w[:, i * C:(i + 1) * C] = w[:, C:2 * C]


# ---------------------------------------------------------------- stages

def _conv(params, prefix, x, stride=1, padding=0):
    return conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], stride, padding)


def _rb_stack(params, prefix, x, nb):
    for k in range(nb):
        p = f"{prefix}.rb{k}"
        x = residual_block(x, params[p + ".conv1.weight"], params[p + ".conv1.bias"],
                           params[p + ".conv2.weight"], params[p + ".conv2.bias"])
    return x


def _as_frames(raw):
    a = np.asarray(getattr(raw, "values", raw), dtype=np.float32)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    return a


def preprocess(raw, params):
    """4x4 stride-4 conv: one latent vector per single-colour CFA block."""
    x = raw if isinstance(raw, Tensor) else Tensor(_as_frames(raw), dtype=params["pre.weight"].dtype)
    H, W = x.shape[-2:]
    if H % 16 or W % 16:
        raise ShapeError(f"raw dims {(H, W)} must be divisible by 16")
    return _conv(params, "pre", x, stride=4)


def encode(feat, params, is_reference, cfg):
    """Latent pyramid (finest first), features taken before each 2x2/s2 downsample."""
    role = "ref" if is_reference else "nonref"
    if feat.shape[1] != cfg.enc_dim[0]:
        raise ShapeError(f"encoder input has {feat.shape[1]} channels, expected {cfg.enc_dim[0]}")
    pyr = []
    x = feat
    for lev in range(cfg.depth):
        x = _rb_stack(params, f"enc.{role}.l{lev}", x, cfg.enc_nb[lev])
        pyr.append(x)
        if lev < cfg.depth - 1:
            x = _conv(params, f"enc.{role}.down{lev}", x, stride=2)
    return pyr


def _flow_array(f):
    data = getattr(f, "data", f)
    data = np.asarray(data, dtype=np.float32)
    return data[None] if data.ndim == 3 else data


def align_fuse(ref_pyr, nonref_pyrs, flows, params, cfg):
    """Per level: warp each non-reference feature with its rescaled flow, concat
    [ref, w_1..w_N] on channels, reduce with a 1x1 conv.

    ``flows`` are at the finest latent (1/4) resolution, one per non-ref frame.
    """
    N = len(nonref_pyrs)
    if N != cfg.num_nonref or len(flows) != N:
        raise ShapeError(f"model expects {cfg.num_nonref} non-reference frames, got {N} and {len(flows)} flows")
    from .tensor import bilinear_warp

    dtype = ref_pyr[0].dtype
    flow_t = [Tensor(_flow_array(f), dtype=dtype) for f in flows]
    for f in flow_t:
        if f.shape[2:] != ref_pyr[0].shape[2:]:
            raise ShapeError(f"flow {f.shape} does not match finest latent {ref_pyr[0].shape}")
    fused = []
    for lev in range(cfg.depth):
        parts = [ref_pyr[lev]]
        hw = ref_pyr[lev].shape[2:]
        for i in range(N):
            g = rescale_flow_tensor(flow_t[i], hw)
            if g.shape[0] != ref_pyr[lev].shape[0]:
                g = Tensor(np.broadcast_to(g.data, (ref_pyr[lev].shape[0],) + g.shape[1:]).copy())
            parts.append(bilinear_warp(nonref_pyrs[i][lev], g))
        x = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        fused.append(_conv(params, f"fuse.l{lev}", x))
    return fused


def decode(fused, params, cfg):
    L = cfg.depth
    if len(fused) != L:
        raise ShapeError(f"decoder needs {L} fused levels, got {len(fused)}")
    x = fused[L - 1]
    for k in range(L):
        if x.shape[1] != cfg.dec_dim[k]:
            raise ShapeError(f"decoder stage {k} input has {x.shape[1]} channels, expected {cfg.dec_dim[k]}")
        x = _rb_stack(params, f"dec.s{k}", x, cfg.dec_nb[k])
        if k < L - 1:
            x = pixel_shuffle(_conv(params, f"dec.up{k}", x, padding=1), 2)
            skip = fused[L - 2 - k]
            x = _conv(params, f"dec.merge{k}", concat([x, skip], axis=1))
    return x


def upsample_head(feat, params):
    x = feat
    for k in range(3):
        x = relu(pixel_shuffle(_conv(params, f"head.up{k}", x, padding=1), 2))
    return _conv(params, "head.out", x, padding=1)


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def forward(frames, flows, params, cfg):
    """Reconstruct RGB at 2H x 2W.

    ``frames``: (N+1, H, W) or batched (B, N+1, H, W) raw values, reference
    first; ``flows``: N flow fields (2, H/4, W/4) or an array (B, N, 2, H/4, W/4).
    """
    frames = np.asarray(frames.stack() if hasattr(frames, "stack") else frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4:
        raise ShapeError(f"frames must be (N+1, H, W) or (B, N+1, H, W), got {frames.shape}")
    B, F, H, W = frames.shape
    N = F - 1
    if N != cfg.num_nonref:
        raise ShapeError(f"model expects {cfg.num_nonref} non-reference frames, got {N}")
    if H % cfg.input_multiple or W % cfg.input_multiple:
        raise ShapeError(f"frame dims {(H, W)} must be divisible by {cfg.input_multiple}")
    if isinstance(flows, np.ndarray) and flows.ndim == 5:
        flow_list = [flows[:, i] for i in range(N)]
    else:
        flow_list = [_flow_array(f) for f in flows]
    if len(flow_list) != N:
        raise ShapeError(f"got {len(flow_list)} flows for {N} non-reference frames")

    # reference frames first, then non-reference slot-major so each slot is contiguous
    order = [frames[:, 0]] + [frames[:, i] for i in range(1, F)]
    stacked = Tensor(np.concatenate(order)[:, None], dtype=params["pre.weight"].dtype)
    feats = _stage("preprocess", preprocess, stacked, params)
    chunks = split_batch(feats, [B] * F) if N else [feats]
    ref_pyr = _stage("encode", encode, chunks[0], params, True, cfg)
    nonref_pyrs = [_stage("encode", encode, c, params, False, cfg) for c in chunks[1:]]
    fused = _stage("align_fuse", align_fuse, ref_pyr, nonref_pyrs, flow_list, params, cfg)
    dec = _stage("decode", decode, fused, params, cfg)
    return _stage("upsample_head", upsample_head, dec, params)


def zero_flows(cfg, hw, batch=None):
    h, w = hw[0] // 4, hw[1] // 4
    shape = (cfg.num_nonref, 2, h, w) if batch is None else (batch, cfg.num_nonref, 2, h, w)
    return np.zeros(shape, dtype=np.float32)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, params, cfg, step=0, extra=None):
    """Directory of ``<name>.ftr`` files plus checkpoint.json, swapped in atomically."""
    target = Path(directory)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}."))
    try:
        for name, t in params.items():
            ftr1.save(tmp / f"{name}.ftr", t.data)
        meta = {"params": {k: list(v.shape) for k, v in params.items()},
                "config": cfg.to_json(), "step": int(step)}
        if extra:
            meta.update(extra)
        ftr1.atomic_write_text(tmp / "checkpoint.json", json.dumps(meta, indent=1, sort_keys=True))
        if target.exists():
            # keep non-parameter companions (e.g. a flow/ subdirectory)
            for child in target.iterdir():
                if child.is_dir() and not (tmp / child.name).exists():
                    shutil.move(str(child), tmp / child.name)
            old = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}.old."))
            os.replace(target, old / "x")
            os.replace(tmp, target)
            shutil.rmtree(old)
        else:
            os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target


def load_checkpoint(directory, dtype=np.float32):
    d = Path(directory)
    meta_path = d / "checkpoint.json"
    if not meta_path.exists():
        raise FormatError(f"{d} is not a checkpoint (missing checkpoint.json)")
    meta = json.loads(meta_path.read_text())
    cfg = ModelConfig.from_json(meta["config"])
    params = {}
    for name, shape in meta["params"].items():
        arr = ftr1.load(d / f"{name}.ftr")
        if list(arr.shape) != list(shape):
            raise FormatError(f"parameter {name}: file shape {arr.shape} != recorded {shape}")
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        raise FormatError(f"checkpoint parameters do not match config ({len(params)} vs {len(expected)})")
    return params, cfg, meta
