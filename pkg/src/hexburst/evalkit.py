"""Quality metrics, the classical baseline, runtime benchmarking and reports."""

import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from . import ftr1, kernels
from .errors import ShapeError
from .imageio import list_images, read_linear_rgb
from .rawsim import demosaic_bilinear_hexadeca

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ in shape")
    return p, t


def psnr(pred, target):
    """10 log10(1 / MSE) for signals in [0, 1]; ``inf`` on an exact match."""
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(img, g):
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, g, axis=-2, mode="constant")
    return out[..., r:-r, r:-r]


def ssim(pred, target, data_range=1.0):
    """Single-scale SSIM over every full 11x11 window, averaged over channels."""
    p, t = _pair(pred, target)
    if p.ndim == 2:
        p, t = p[None], t[None]
    if min(p.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"image {p.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mp, mt = _valid_filter(p, g), _valid_filter(t, g)
    spp = _valid_filter(p * p, g) - mp * mp
    stt = _valid_filter(t * t, g) - mt * mt
    spt = _valid_filter(p * t, g) - mp * mt
    num = (2 * mp * mt + c1) * (2 * spt + c2)
    den = (mp * mp + mt * mt + c1) * (spp + stt + c2)
    return float(np.mean(num / den))


def baseline_upscale(burst_or_raw, scale=2):
    """Reference-frame demosaic followed by bicubic x2."""
    raw = burst_or_raw.frames[0] if hasattr(burst_or_raw, "frames") else burst_or_raw
    rgb = demosaic_bilinear_hexadeca(raw)
    H, W = rgb.shape[1:]
    up = [cv2.resize(ch.astype(np.float32), (W * scale, H * scale), interpolation=cv2.INTER_CUBIC)
          for ch in rgb]
    return np.clip(np.stack(up), 0.0, 1.0)


# ---------------------------------------------------------------- timing

def machine_description():
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernels": kernels.IMPL,
    }


def median_seconds(times):
    return float(np.median(np.asarray(times, dtype=np.float64)))


@dataclass
class BenchResult:
    median: float
    times: list
    machine: dict = field(default_factory=machine_description)

    def to_json(self):
        return {"median_seconds": self.median, "times": self.times, "machine": self.machine}


def bench(fn, repeats=5, threads=1):
    """Median wall-clock of ``fn()`` over ``repeats`` runs after one excluded warm-up."""
    if repeats < 3:
        raise ShapeError("bench needs repeats >= 3")
    with threadpool_limits(limits=threads):
        fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    return BenchResult(median_seconds(times), times)


def bench_model(params, cfg, hw, repeats=5, threads=1, seed=0):
    """Time one forward pass of a burst of size ``hw`` with zero flows."""
    from .model import forward, zero_flows
    rng = np.random.default_rng(seed)
    frames = rng.random((cfg.num_nonref + 1,) + tuple(hw)).astype(np.float32)
    flows = zero_flows(cfg, hw)
    return bench(lambda: forward(frames, flows, params, cfg), repeats, threads)


# ---------------------------------------------------------------- reports

@dataclass
class MethodScores:
    name: str
    psnr: list
    ssim: list
    seconds: float = None
    params: int = None
    best: bool = False

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))


def _num(v):
    if v is None:
        return None
    return "inf" if np.isinf(v) else float(v)


@dataclass
class EvalReport:
    methods: list
    header: str = "PSNR/SSIM on linear RGB in [0, 1], full frame, no border crop."

    def to_json(self):
        return {
            "header": self.header,
            "methods": [{
                "name": m.name, "psnr": [_num(v) for v in m.psnr], "ssim": m.ssim,
                "mean_psnr": _num(m.mean_psnr), "mean_ssim": m.mean_ssim,
                "seconds": m.seconds, "params": m.params, "best": m.best,
            } for m in self.methods],
        }

    def to_markdown(self):
        lines = [self.header, "", "| Method | PSNR (dB) | SSIM | Time (s) | Params |",
                 "|---|---|---|---|---|"]
        for m in self.methods:
            name = f"**{m.name}**" if m.best else m.name
            t = "" if m.seconds is None else f"{m.seconds:.4f}"
            n = "" if m.params is None else f"{m.params:,}"
            lines.append(f"| {name} | {m.mean_psnr:.2f} | {m.mean_ssim:.4f} | {t} | {n} |")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        ftr1.atomic_write_text(out_dir / "report.json", json.dumps(self.to_json(), indent=1))
        ftr1.atomic_write_text(out_dir / "report.md", self.to_markdown())


def compare_report(method_outputs, gt_set, seconds=None, params=None):
    """Score every named prediction list against ``gt_set``; the best mean PSNR is flagged."""
    if not method_outputs:
        raise ShapeError("compare_report: no prediction sets given")
    if not len(gt_set):
        raise ShapeError("compare_report: empty ground-truth set")
    seconds = seconds or {}
    params = params or {}
    rows = []
    for name, preds in method_outputs.items():
        if len(preds) != len(gt_set):
            raise ShapeError(f"method {name!r} has {len(preds)} predictions for {len(gt_set)} targets")
        if not len(preds):
            raise ShapeError(f"method {name!r} has an empty prediction set")
        rows.append(MethodScores(name, [psnr(p, g) for p, g in zip(preds, gt_set)],
                                 [ssim(p, g) for p, g in zip(preds, gt_set)],
                                 seconds.get(name), params.get(name)))
    best = max(rows, key=lambda m: m.mean_psnr)
    best.best = True
    return EvalReport(rows)


def load_image(path):
    path = Path(path)
    if path.suffix == ".ftr":
        return ftr1.load(path).astype(np.float64)
    return read_linear_rgb(path)


def load_image_set(directory):
    """Name -> image for every .ftr/.png/.ppm in ``directory``."""
    d = Path(directory)
    files = sorted(set(list_images(d)) | set(d.glob("*.ftr")))
    return {p.stem: load_image(p) for p in files}


def evaluate_dirs(pred_dir, gt_dir):
    preds, gts = load_image_set(pred_dir), load_image_set(gt_dir)
    if not preds:
        raise ShapeError(f"no predictions found in {pred_dir}")
    missing = sorted(set(preds) - set(gts))
    if missing:
        raise ShapeError(f"no ground truth for {missing[:5]}")
    names = sorted(preds)
    return compare_report({"pred": [preds[n] for n in names]}, [gts[n] for n in names]), names
