"""Deterministic synthetic grayscale images for tests and desk-scale training.

The generators favor content with repeated structure (stripes, tiles,
repeated shapes) so non-local self-similarity has something to exploit.
"""

from __future__ import annotations

import numpy as np

from .validation import check_random_state


def make_piecewise_constant(size=64, n_shapes=6, random_state=0) -> np.ndarray:
    """Rectangles and disks of constant intensity on a constant background."""
    rng = check_random_state(random_state)
    h, w = (size, size) if np.isscalar(size) else size
    img = np.full((h, w), rng.uniform(0.2, 0.8))
    yy, xx = np.mgrid[0:h, 0:w]
    side = max(2, min(h, w, 8 * 4) // 4)  # smallest shape extent, 8 px for images >= 32 px
    for _ in range(n_shapes):
        val = rng.uniform(0.05, 0.95)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h - side), rng.integers(0, w - side)
            y1 = y0 + rng.integers(side, max(side + 1, h // 2))
            x1 = x0 + rng.integers(side, max(side + 1, w // 2))
            img[y0:y1, x0:x1] = val
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(min(5.0, min(h, w) / 8), min(h, w) / 4)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = val
    return img


def _stripes(h, w, rng):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(5, 12)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = (xx * np.cos(theta) + yy * np.sin(theta)) / period
    lo, hi = np.sort(rng.uniform(0.1, 0.9, size=2))
    return np.where((phase % 1.0) < 0.5, lo, hi)


def _tiles(h, w, rng):
    cell = int(rng.integers(6, 14))
    motif = rng.uniform(0.1, 0.9, size=(cell, cell))
    motif = np.where(motif > 0.5, motif.max(), motif.min())
    reps = (h // cell + 1, w // cell + 1)
    return np.tile(motif, reps)[:h, :w]


def _repeated_disks(h, w, rng):
    img = np.full((h, w), rng.uniform(0.1, 0.5))
    yy, xx = np.mgrid[0:h, 0:w]
    spacing = rng.uniform(10, 18)
    rad = rng.uniform(2.5, spacing / 2.5)
    val = rng.uniform(0.6, 0.95)
    for cy in np.arange(spacing / 2, h, spacing):
        for cx in np.arange(spacing / 2, w, spacing):
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = val
    return img


def _gradient_shapes(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.3 + 0.4 * (yy * rng.uniform(-1, 1) + xx * rng.uniform(-1, 1)) / (h + w)
    shapes = make_piecewise_constant((h, w), n_shapes=5, random_state=rng)
    return 0.5 * base + 0.5 * shapes


_KINDS = (_stripes, _tiles, _repeated_disks, _gradient_shapes)


def make_synthetic_images(n_images=20, size=64, random_state=0) -> np.ndarray:
    """Stack of ``n_images`` images in [0, 1] cycling through several content types."""
    rng = check_random_state(random_state)
    h, w = (size, size) if np.isscalar(size) else size
    out = np.empty((n_images, h, w))
    for i in range(n_images):
        out[i] = np.clip(_KINDS[i % len(_KINDS)](h, w, rng), 0.0, 1.0)
    return out


def add_gaussian_noise(images, sigma_8bit: float, random_state=0) -> np.ndarray:
    """AWGN with standard deviation ``sigma_8bit / 255``; no clipping."""
    rng = check_random_state(random_state)
    images = np.asarray(images, dtype=np.float64)
    return images + rng.normal(0.0, sigma_8bit / 255.0, size=images.shape)
