"""Grayscale image I/O, bicubic resampling, quality metrics and multi-view testing.

Images are 2-D float arrays with values in [0, 1].
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .validation import check_image

LUMA = (0.299, 0.587, 0.114)
PSNR_CAP = 100.0


class ImageFormatError(ValueError):
    """PNG with a mode or bit depth this module does not read."""


# ----------------------------------------------------------------------------
# PNG I/O


def load_png(path) -> np.ndarray:
    """Read an 8- or 16-bit gray or RGB(A) PNG as a gray image in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise FileNotFoundError(f"no such image: {path}") from None
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    if mode == "L":
        return arr.astype(np.float64) / 255.0
    if mode in ("I;16", "I;16B", "I;16L"):
        return arr.astype(np.float64) / 65535.0
    if mode == "I":
        # Pillow widens 16-bit gray to 32-bit ints
        if arr.min() < 0 or arr.max() > 65535:
            raise ImageFormatError(f"{path}: 32-bit integer images are not supported")
        return arr.astype(np.float64) / 65535.0
    if mode == "LA":
        return arr[..., 0].astype(np.float64) / 255.0
    if mode in ("RGB", "RGBA"):
        rgb = arr[..., :3].astype(np.float64) / 255.0
        return rgb @ np.asarray(LUMA)
    raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r}")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """Write an 8-bit gray PNG; values are clamped and quantized to round(255 p)."""
    arr = check_image(img)
    Image.fromarray(to_uint8(arr), mode="L").save(Path(path), format="PNG")


# ----------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(x, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is the Catmull-Rom member."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, scale: float, antialias: bool = True) -> np.ndarray:
    """``(n_out, n_in)`` matrix of one 1-D bicubic pass with edge replication.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / scale - 0.5``.
    When shrinking with ``antialias`` the kernel is stretched by ``1 / scale``.
    Rows are normalized to sum to one.
    """
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    support = 2.0 * stretch
    left = np.floor(centers - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    wgt = cubic_kernel((centers[:, None] - idx) / stretch)
    wgt /= wgt.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), wgt.ravel())
    return mat


def bicubic_resize(img, factor=None, out_shape=None, antialias: bool = True) -> np.ndarray:
    """Resize by ``factor`` (output side ``ceil(side * factor)``) or to ``out_shape``.

    With ``out_shape`` the per-axis scale is ``out / in`` unless ``factor`` is
    also given, in which case ``factor`` sets the sampling grid.
    """
    arr = check_image(img)
    h, w = arr.shape
    if factor is None and out_shape is None:
        raise ValueError("give factor or out_shape")
    if factor is not None and not float(factor) > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    if out_shape is None:
        f = float(factor)
        # tolerate float error in products like 24 * 0.7
        out_shape = (math.ceil(h * f - 1e-9), math.ceil(w * f - 1e-9))
    oh, ow = int(out_shape[0]), int(out_shape[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate output size {oh}x{ow}")
    sy = float(factor) if factor is not None else oh / h
    sx = float(factor) if factor is not None else ow / w
    if (oh, ow) == (h, w) and sy == 1.0 and sx == 1.0:
        return arr.copy()
    wy = resize_weights(h, oh, sy, antialias)
    wx = resize_weights(w, ow, sx, antialias)
    return wy @ arr @ wx.T


def degrade_sr(img, factor: int) -> np.ndarray:
    """Bicubic downscale by ``factor`` then upscale back to the original size."""
    arr = check_image(img)
    small = bicubic_resize(arr, 1.0 / factor)
    return bicubic_resize(small, float(factor), out_shape=arr.shape)


# ----------------------------------------------------------------------------
# metrics


def psnr(a, b, border_crop: int = 0) -> float:
    """Peak signal-to-noise ratio for peak 1, capped at 100 dB."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    c = int(border_crop)
    if c < 0 or 2 * c >= min(a.shape):
        raise ValueError(f"border_crop={c} must be below half the smaller side")
    if c:
        a, b = a[c:-c, c:-c], b[c:-c, c:-c]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    u = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(u**2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully contained Gaussian windows (L = 1)."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------------------
# dihedral views


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """View ``k`` in 0..7: rotate by ``k % 4`` quarter turns, transpose-flip if ``k >= 4``."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    return np.flip(out, axis=-1) if k >= 4 else out


def dihedral_inverse(img: np.ndarray, k: int) -> np.ndarray:
    out = np.flip(img, axis=-1) if k >= 4 else img
    return np.rot90(out, -(k % 4), axes=(-2, -1))


def multi_view_restore(img, model, views=range(8)) -> np.ndarray:
    """Average of ``model`` applied to every dihedral view, mapped back.

    ``model`` is any callable taking and returning a 2-D image.
    """
    arr = check_image(img)
    views = list(views)
    outs = [dihedral_inverse(np.asarray(model(np.ascontiguousarray(dihedral(arr, k)))), k) for k in views]
    return np.mean(np.stack(outs), axis=0)
