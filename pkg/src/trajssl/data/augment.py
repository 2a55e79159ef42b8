"""Image augmentations for the semantic branch.

Triplet images are never passed through here. There is deliberately no
horizontal flip: a mirrored view is the view from the mirrored azimuth.
"""
from __future__ import annotations

import numpy as np

CROP_AREA = (0.6, 1.0)
INTENSITY = (0.8, 1.2)
NOISE_SIGMA = 0.02


def bilinear_crop(pixels: np.ndarray, x0: float, y0: float, width: float, height: float,
                  out_size: int) -> np.ndarray:
    """Resample the window at (x0, y0) of the given size onto an out_size grid.

    Coordinates are in pixels with the image occupying [0, W] x [0, H];
    sample points are the output pixel centres mapped into the window, so a
    full-image window at the same size reproduces the input exactly.
    """
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape
    xs = x0 + (np.arange(out_size) + 0.5) * (width / out_size) - 0.5
    ys = y0 + (np.arange(out_size) + 0.5) * (height / out_size) - 0.5
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    xi = np.floor(xs).astype(int)
    yi = np.floor(ys).astype(int)
    # on the last row/column the weight of the far neighbour is exactly 0
    xn = np.minimum(xi + 1, w - 1)
    yn = np.minimum(yi + 1, h - 1)
    fx = (xs - xi)[None, :]
    fy = (ys - yi)[:, None]
    tl = img[np.ix_(yi, xi)]
    tr = img[np.ix_(yi, xn)]
    bl = img[np.ix_(yn, xi)]
    br = img[np.ix_(yn, xn)]
    top = tl + (tr - tl) * fx
    bottom = bl + (br - bl) * fx
    return top + (bottom - top) * fy


def apply_augmentation(pixels: np.ndarray, crop: tuple, intensity: float, noise: np.ndarray | None) -> np.ndarray:
    x0, y0, side = crop
    out = bilinear_crop(pixels, x0, y0, side, side, pixels.shape[0])
    out = np.clip(out * intensity, 0.0, 1.0)
    if noise is not None:
        out = np.clip(out + noise, 0.0, 1.0)
    return out.astype(np.float32)


def augment(pixels: np.ndarray, rng: np.random.Generator, crop_area=CROP_AREA, intensity=INTENSITY,
            noise_sigma: float = NOISE_SIGMA) -> np.ndarray:
    """Random square resized crop, intensity scaling and clamped Gaussian noise."""
    size = pixels.shape[0]
    side = np.sqrt(rng.uniform(*crop_area)) * size
    x0 = rng.uniform(0.0, size - side)
    y0 = rng.uniform(0.0, size - side)
    gain = rng.uniform(*intensity)
    noise = rng.normal(0.0, noise_sigma, size=pixels.shape) if noise_sigma > 0 else None
    return apply_augmentation(pixels, (x0, y0, side), gain, noise)
