"""Synthetic hexadeca-Bayer burst generation.

Clean linear RGB is un-processed (inverse white balance and brightness),
translated, downscaled, blurred, mosaiced to a 4x4-block Bayer CFA, and
corrupted with heteroscedastic Gaussian noise (variance = shot * x + read).
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ftr1, kernels
from .errors import ConfigError, FormatError, ShapeError
from .imageio import list_images, read_linear_rgb

log = logging.getLogger(__name__)

R, G, B = 0, 1, 2


@dataclass(frozen=True)
class CfaLayout:
    """Colour of each 4x4 block, indexed by (block_row % 2, block_col % 2)."""

    block: int = 4
    pattern: tuple = ((R, G), (G, B))

    @property
    def period(self):
        return 2 * self.block

    def color_at(self, y, x):
        return self.pattern[(y // self.block) % 2][(x // self.block) % 2]

    def color_map(self, H, W):
        by = (np.arange(H) // self.block) % 2
        bx = (np.arange(W) // self.block) % 2
        return np.asarray(self.pattern)[by[:, None], bx[None, :]]

    def masks(self, H, W):
        cmap = self.color_map(H, W)
        return np.stack([cmap == c for c in (R, G, B)]).astype(np.float64)


HEXADECA = CfaLayout()


@dataclass
class HexadecaRaw:
    values: np.ndarray
    layout: CfaLayout = HEXADECA
    white_level: float = 1.0
    shot: float = 0.0
    read: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeError(f"raw frame must be 2-D, got shape {v.shape}")
        p = self.layout.period
        if v.shape[0] % p or v.shape[1] % p:
            raise ShapeError(f"raw dims {v.shape} not divisible by the {p}x{p} CFA super-cell")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class BurstSample:
    frames: list
    gt: np.ndarray
    shifts: np.ndarray
    sigma: float
    shot: float
    read: float
    gains: tuple = (1.0, 1.0, 1.0)
    brightness: float = 1.0
    seed: int = 0

    @property
    def num_nonref(self):
        return len(self.frames) - 1

    def stack(self):
        """Frames as an (N+1, H, W) float32 array, reference first."""
        return np.stack([f.values for f in self.frames]).astype(np.float32)


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 4
    max_shift: float = 16.0
    blur_sigma: tuple = (0.2, 2.0)
    shot: tuple = (1e-4, 1e-2)
    read: tuple = (1e-6, 1e-4)
    red_gain: tuple = (1.9, 2.4)
    blue_gain: tuple = (1.5, 1.9)
    brightness: tuple = (0.8, 1.2)
    sr_scale: int = 2
    seed: int = 0
    layout: CfaLayout = field(default=HEXADECA)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("frame count must be at least 1")
        if self.max_shift < 0:
            raise ConfigError("max_shift must be non-negative")
        if self.sr_scale < 1:
            raise ConfigError("sr_scale must be a positive integer")
        for name in ("blur_sigma", "shot", "read", "red_gain", "blue_gain", "brightness"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} range {(lo, hi)} must be ordered and non-negative")
        for name in ("red_gain", "blue_gain", "brightness"):
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_json(self):
        d = asdict(self)
        d["layout"] = {"block": self.layout.block, "pattern": [list(r) for r in self.layout.pattern]}
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        lay = d.pop("layout", None)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        if lay is not None:
            d["layout"] = CfaLayout(lay["block"], tuple(tuple(r) for r in lay["pattern"]))
        return cls(**d)


def domain_b_config(**overrides):
    """Stand-in for real captures: blur and noise ranges disjoint from the defaults."""
    base = dict(blur_sigma=(2.0, 3.0), shot=(1e-2, 3e-2), read=(1e-4, 1e-3))
    base.update(overrides)
    return SynthConfig(**base)


# ---------------------------------------------------------------- ISP inverse

def unprocess(clean_rgb, gains, brightness):
    gains = np.asarray(gains, dtype=np.float64)
    if np.any(gains <= 0) or brightness <= 0:
        raise ConfigError(f"gains {tuple(gains)} and brightness {brightness} must be positive")
    rgb = np.asarray(clean_rgb, dtype=np.float64)
    return np.clip(rgb / gains[:, None, None] / brightness, 0.0, 1.0)


def mosaic_hexadeca(rgb, layout=HEXADECA):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected 3xHxW RGB, got {rgb.shape}")
    _, H, W = rgb.shape
    p = layout.period
    if H % p or W % p:
        raise ShapeError(f"RGB dims {(H, W)} not divisible by the {p}x{p} CFA super-cell")
    cmap = layout.color_map(H, W)
    values = np.take_along_axis(rgb, cmap[None], axis=0)[0]
    return HexadecaRaw(values=values.astype(np.float32), layout=layout)


def _tent(radius):
    t = np.arange(-radius + 1, radius, dtype=np.float64)
    return 1.0 - np.abs(t) / radius


def demosaic_bilinear_hexadeca(raw):
    """Normalised-convolution bilinear demosaic; exact at each channel's sample sites."""
    v = np.asarray(raw.values, dtype=np.float64)
    H, W = v.shape
    masks = raw.layout.masks(H, W)
    k = _tent(raw.layout.period)
    out = np.empty((3, H, W))
    for c in range(3):
        m = masks[c]
        num = ndimage.convolve1d(ndimage.convolve1d(v * m, k, axis=0, mode="constant"), k, axis=1, mode="constant")
        den = ndimage.convolve1d(ndimage.convolve1d(m, k, axis=0, mode="constant"), k, axis=1, mode="constant")
        est = num / np.maximum(den, 1e-12)
        out[c] = np.where(m > 0, v, est)
    return out


# ---------------------------------------------------------------- burst rendering

def translate(rgb, dx, dy):
    """Content moved by (+dx, +dy) pixels, bilinear with edge replication."""
    C, H, W = rgb.shape
    flow = np.empty((1, 2, H, W))
    flow[:, 0] = -dx
    flow[:, 1] = -dy
    return kernels.warp_forward(np.ascontiguousarray(rgb[None], dtype=np.float64), flow)[0]


def box_downscale(rgb, s):
    C, H, W = rgb.shape
    return rgb.reshape(C, H // s, s, W // s, s).mean(axis=(2, 4))


def gaussian_blur(rgb, sigma):
    if sigma <= 0:
        return rgb
    return np.stack([ndimage.gaussian_filter(ch, sigma, mode="nearest") for ch in rgb])


def add_noise(values, shot, read, rng, white_level=1.0):
    var = np.maximum(shot * values + read, 0.0)
    noisy = values + rng.standard_normal(values.shape) * np.sqrt(var)
    return np.clip(noisy, 0.0, white_level)


def _log_uniform(rng, lo, hi):
    if hi <= 0:
        return 0.0
    if lo == hi:
        return float(lo)
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def synthesize_burst(gt_rgb, cfg, seed):
    """Render one burst from clean linear RGB at the SR output resolution.

    ``shifts[i]`` is the content displacement (dx, dy) of frame i relative to
    the reference, in raw pixels, which is also the backward flow that
    aligns frame i onto frame 0.
    """
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    s = cfg.sr_scale
    mult = cfg.layout.period * s
    if gt_rgb.ndim != 3 or gt_rgb.shape[0] != 3 or gt_rgb.shape[1] % mult or gt_rgb.shape[2] % mult:
        raise ShapeError(f"gt shape {gt_rgb.shape} must be 3xHxW with H, W divisible by {mult}")
    rng = np.random.default_rng(seed)
    gains = (float(rng.uniform(*cfg.red_gain)), 1.0, float(rng.uniform(*cfg.blue_gain)))
    brightness = float(rng.uniform(*cfg.brightness))
    sigma = float(rng.uniform(*cfg.blur_sigma))
    shot = _log_uniform(rng, *cfg.shot)
    read = _log_uniform(rng, *cfg.read)
    shifts = np.zeros((cfg.frames, 2))
    if cfg.frames > 1:
        shifts[1:] = rng.uniform(-cfg.max_shift, cfg.max_shift, (cfg.frames - 1, 2))

    frames = []
    for i in range(cfg.frames):
        dx, dy = shifts[i]
        moved = translate(gt_rgb, dx * s, dy * s) if (dx or dy) else gt_rgb
        img = gaussian_blur(box_downscale(moved, s), sigma)
        raw = mosaic_hexadeca(unprocess(img, gains, brightness), cfg.layout)
        vals = add_noise(raw.values.astype(np.float64), shot, read, rng)
        frames.append(HexadecaRaw(vals.astype(np.float32), cfg.layout, 1.0, shot, read))
    gt = unprocess(gt_rgb, gains, brightness).astype(np.float32)
    return BurstSample(frames=frames, gt=gt, shifts=shifts, sigma=sigma, shot=shot, read=read,
                       gains=gains, brightness=brightness, seed=int(seed))


# ---------------------------------------------------------------- on-disk bursts

def burst_meta(sample):
    return {
        "frames": [f"frame_{i}.ftr" for i in range(len(sample.frames))],
        "gt": "gt.ftr",
        "shifts": [[float(a), float(b)] for a, b in sample.shifts],
        "sigma": sample.sigma,
        "shot": sample.shot,
        "read": sample.read,
        "gains": list(sample.gains),
        "brightness": sample.brightness,
        "seed": sample.seed,
    }


def save_burst(directory, sample):
    d = Path(directory)
    meta = burst_meta(sample)
    for name, f in zip(meta["frames"], sample.frames):
        ftr1.save(d / name, f.values)
    ftr1.save(d / meta["gt"], sample.gt)
    ftr1.atomic_write_text(d / "burst.json", json.dumps(meta, indent=1, sort_keys=True))
    return meta


def load_burst(directory, layout=HEXADECA):
    """Read a burst directory. ``gt`` is None when absent."""
    d = Path(directory)
    meta_path = d / "burst.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        names = meta["frames"]
    else:
        meta = {}
        names = sorted((p.name for p in d.glob("frame_*.ftr")),
                       key=lambda n: int(n[len("frame_"):-len(".ftr")]))
    if not names:
        raise FormatError(f"no frame_*.ftr files in {d}")
    frames = []
    for n in names:
        v = ftr1.load(d / n)
        if v.ndim == 3 and v.shape[0] == 1:
            v = v[0]
        frames.append(HexadecaRaw(v, layout, 1.0, meta.get("shot", 0.0), meta.get("read", 0.0)))
    gt_name = meta.get("gt", "gt.ftr")
    gt = ftr1.load(d / gt_name) if (d / gt_name).exists() else None
    shifts = np.asarray(meta.get("shifts", np.zeros((len(frames), 2))), dtype=np.float64)
    return BurstSample(frames=frames, gt=gt, shifts=shifts, sigma=meta.get("sigma", 0.0),
                       shot=meta.get("shot", 0.0), read=meta.get("read", 0.0),
                       gains=tuple(meta.get("gains", (1.0, 1.0, 1.0))),
                       brightness=meta.get("brightness", 1.0), seed=meta.get("seed", 0))


def _crop_to_multiple(rgb, mult):
    _, H, W = rgb.shape
    h, w = H - H % mult, W - W % mult
    if h == 0 or w == 0:
        raise ShapeError(f"image {H}x{W} smaller than one {mult}x{mult} tile")
    return rgb[:, :h, :w]


def _synth_one(job):
    path, out_dir, cfg, k = job
    name = Path(path).stem
    seed = cfg.seed + k
    try:
        rgb = read_linear_rgb(path)
        rgb = _crop_to_multiple(rgb, cfg.layout.period * cfg.sr_scale)
    except (FormatError, ShapeError, OSError) as exc:
        return {"source": Path(path).name, "skipped": str(exc), "seed": seed}
    sample = synthesize_burst(rgb, cfg, seed)
    meta = save_burst(Path(out_dir) / name, sample)
    entry = {
        "source": Path(path).name,
        "gt": f"{name}/{meta['gt']}",
        "frames": [f"{name}/{f}" for f in meta["frames"]],
    }
    entry.update({k2: meta[k2] for k2 in ("shifts", "sigma", "shot", "read", "gains", "brightness", "seed")})
    return entry


def dataset_synthesize(input_dir, output_dir, cfg, threads=1):
    """Render one burst per input image (seed = cfg.seed + index) and write manifest.json."""
    images = list_images(input_dir)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(p), str(out), cfg, k) for k, p in enumerate(images)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            manifest = list(pool.map(_synth_one, jobs))
    else:
        manifest = [_synth_one(j) for j in jobs]
    for entry in manifest:
        if "skipped" in entry:
            log.warning("skipped %s: %s", entry["source"], entry["skipped"])
    ftr1.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    ftr1.atomic_write_text(out / "synth_config.json", json.dumps(cfg.to_json(), indent=1, sort_keys=True))
    return manifest


def load_dataset(directory):
    """All bursts listed in ``directory/manifest.json``, skipping failed entries."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return [load_burst(d / Path(e["gt"]).parent) for e in manifest if "skipped" not in e]
