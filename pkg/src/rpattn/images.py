"""PNG I/O and small image utilities shared by data, gen and the trainer.

In-memory images are float (3, H, W) arrays in [-1, 1]; on disk they are
8-bit RGB PNGs. The mapping is ``round((x + 1) * 127.5)``, clipped.
"""
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image):
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels):
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path, size=None):
    """Read an RGB image; resize with bilinear filtering when ``size`` differs."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return from_uint8(np.asarray(im))


def tile(images, cols=None, pad=1):
    """Lay (N, 3, H, W) images out on a grid with a white border; returns (3, H', W')."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for k in range(n):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        out[:, y:y + h, x:x + w] = images[k]
    return out


def save_grid(path, images, cols=None):
    save_png(path, tile(images, cols))


def downsample(images, factor):
    """Average-pool (N, C, H, W) by an integer factor."""
    images = np.asarray(images)
    if factor == 1:
        return images
    n, c, h, w = images.shape
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5)).astype(images.dtype)
