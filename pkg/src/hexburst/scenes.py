"""Procedural clean RGB scenes standing in for a photo corpus.

Scenes mix smooth colour gradients, anti-aliased shapes and sinusoidal
texture patches under a multiplicative 1/f texture, so they carry edges at
many orientations and no perfectly flat regions (natural photos rarely have
any). Run ``python -m hexburst.scenes --out DIR --count N`` to
write a PNG corpus.
"""

import argparse
from pathlib import Path

import cv2
import numpy as np

from .imageio import write_srgb8


def pink_noise(h, w, rng, beta=1.0):
    """Zero-mean, unit-std noise with a 1/f^beta amplitude spectrum."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    amp = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f ** beta
    amp[0, 0] = 0.0
    n = np.fft.irfft2(amp, s=(h, w))
    return n / max(n.std(), 1e-12)


def random_scene(h, w, rng, shapes=(6, 14), supersample=2, texture=0.25):
    H, W = h * supersample, w * supersample
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    img = (c0[:, None, None] * (1 - t) + c1[:, None, None] * t).transpose(1, 2, 0).copy()

    for _ in range(int(rng.integers(shapes[0], shapes[1] + 1))):
        color = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
        kind = rng.integers(0, 3)
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        size = rng.uniform(0.05, 0.3) * max(H, W)
        if kind == 0:
            axes = (int(size), int(size * rng.uniform(0.3, 1.0)))
            cv2.ellipse(img, (int(cx), int(cy)), axes, float(rng.uniform(0, 180)), 0, 360, color, -1)
        elif kind == 1:
            n = int(rng.integers(3, 6))
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            r = size * rng.uniform(0.5, 1.0, n)
            pts = np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1).astype(np.int32)
            cv2.fillPoly(img, [pts], color)
        else:
            mask = np.zeros((H, W), dtype=np.float32)
            cv2.circle(mask, (int(cx), int(cy)), int(size), 1.0, -1)
            freq = rng.uniform(4, 24) / max(H, W)
            phi = rng.uniform(0, 2 * np.pi)
            grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(phi) * np.arange(W)[None, :]
                                                             + np.sin(phi) * np.arange(H)[:, None]))
            layer = grating[:, :, None] * np.asarray(color)[None, None, :]
            img = img * (1 - mask[:, :, None]) + layer * mask[:, :, None]

    if texture > 0:
        img = img * (1.0 + texture * pink_noise(H, W, rng))[:, :, None]
    img = cv2.resize(img.astype(np.float32), (w, h), interpolation=cv2.INTER_AREA)
    return np.clip(img.transpose(2, 0, 1).astype(np.float64), 0.0, 1.0)


def write_corpus(out_dir, count, size=(128, 128), seed=0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        p = out_dir / f"scene_{k:04d}.png"
        write_srgb8(p, random_scene(size[0], size[1], rng))
        paths.append(p)
    return paths


def main(argv=None):
    ap = argparse.ArgumentParser(description="write a procedural clean-RGB corpus")
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=16)
    ap.add_argument("--size", default="128x128", help="HxW")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    h, w = (int(v) for v in a.size.lower().split("x"))
    write_corpus(a.out, a.count, (h, w), a.seed)


if __name__ == "__main__":
    main()
