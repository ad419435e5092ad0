"""PNG / binary PPM input and 16-bit PNG output with sRGB transfer."""

from pathlib import Path

import cv2
import numpy as np

from .errors import FormatError
from .ftr1 import atomic_write_bytes

IMAGE_SUFFIXES = (".png", ".ppm")


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1 / 2.4) - 0.055)


def read_srgb(path):
    """Decode an 8/16-bit PNG or P6 PPM to a 3xHxW float image in [0, 1] (sRGB-encoded)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot decode image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"unsupported sample type {img.dtype} in {path}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    rgb = img[:, :, ::-1].astype(np.float64) / scale
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def read_linear_rgb(path):
    return srgb_to_linear(read_srgb(path))


def encode_png16(linear_rgb):
    """Clamp, sRGB-encode and pack a 3xHxW linear image as 16-bit PNG bytes."""
    rgb = np.asarray(linear_rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise FormatError(f"expected a 3xHxW image, got shape {rgb.shape}")
    q = np.round(linear_to_srgb(rgb) * 65535.0).astype(np.uint16)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1]))
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def write_png16(path, linear_rgb):
    atomic_write_bytes(path, encode_png16(linear_rgb))


def write_srgb8(path, srgb):
    """Store an sRGB-encoded 3xHxW image as an 8-bit PNG (used for test corpora)."""
    q = np.round(np.clip(srgb, 0, 1) * 255.0).astype(np.uint8)
    ok, buf = cv2.imencode(Path(path).suffix or ".png", np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1]))
    if not ok:
        raise FormatError(f"encoding {path} failed")
    atomic_write_bytes(path, buf.tobytes())


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
