"""Resampling primitives and full-reference quality metrics.

Images are (H, W, C) or (H, W) float arrays with values in [0, 1].  Bicubic
resampling uses the Keys kernel (a = -0.5) and widens the kernel support
when downsampling so the result is anti-aliased, matching the conventional
degradation model used to synthesize low-resolution training inputs.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "resample_bicubic",
    "resample_bicubic_to",
    "bicubic_matrix",
    "resize_nearest",
    "psnr",
    "ssim",
]


def _cubic_kernel(t):
    """Keys bicubic kernel with a = -0.5."""
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t <= 1
    m2 = (t > 1) & (t < 2)
    out[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    out[m2] = a * t[m2] ** 3 - 5 * a * t[m2] ** 2 + 8 * a * t[m2] - 4 * a
    return out


@functools.lru_cache(maxsize=256)
def bicubic_matrix(n_in, n_out):
    """(n_out, n_in) resampling matrix; rows are normalized kernel weights.

    Edge taps are accumulated into the nearest valid pixel (replication), so
    constants are reproduced exactly and linear ramps are exact away from
    the borders.
    """
    scale = n_out / n_in
    s_eff = min(scale, 1.0)
    support = 2.0 / s_eff
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = int(math.floor(center - support)) + 1
        hi = int(math.floor(center + support)) + 1
        taps = np.arange(lo, hi)
        weights = _cubic_kernel((taps - center) * s_eff)
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), weights)
    m /= m.sum(axis=1, keepdims=True)
    return m


def _as_hwc(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None], True
    if img.ndim == 3:
        return img, False
    raise ValueError("image must be (H, W) or (H, W, C)")


def resample_bicubic_to(image, out_h, out_w):
    """Bicubic resample to an explicit output size, clamped to [0, 1]."""
    img, squeeze = _as_hwc(image)
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        out = img.copy()
    else:
        rm = bicubic_matrix(h, out_h)
        cm = bicubic_matrix(w, out_w)
        out = np.einsum("oh,hwc->owc", rm, img)
        out = np.einsum("pw,owc->opc", cm, out)
        out = np.clip(out, 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


def resample_bicubic(image, factor):
    """Resample by a scale factor (>1 upsamples, <1 downsamples with anti-alias)."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    img, squeeze = _as_hwc(image)
    h, w = img.shape[:2]
    out_h = int(round(h * factor))
    out_w = int(round(w * factor))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"factor {factor} yields an empty {out_h}x{out_w} output")
    out = resample_bicubic_to(img, out_h, out_w)
    return out[:, :, 0] if squeeze else out


def resize_nearest(map_, direction):
    """Exact 2x nearest-neighbour resize: 'up' replicates each pixel into a
    2x2 block, 'down' keeps the top-left pixel of each block."""
    arr = np.asarray(map_)
    if arr.ndim not in (2, 3):
        raise ValueError("expected (H, W) or (H, W, C)")
    if direction == "up":
        return np.repeat(np.repeat(arr, 2, axis=0), 2, axis=1)
    if direction == "down":
        h, w = arr.shape[:2]
        if h % 2 or w % 2:
            raise ValueError(f"downsampling needs even spatial dims, got {h}x{w}")
        return arr[0::2, 0::2].copy()
    raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on [0, 1] images; inf for identical inputs."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


@functools.lru_cache(maxsize=8)
def _gaussian_taps(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _local_mean(img, taps):
    out = correlate1d(img, taps, axis=0, mode="constant")
    return correlate1d(out, taps, axis=1, mode="constant")


def ssim(a, b):
    """Mean structural similarity with an 11x11 Gaussian window (sigma = 1.5).

    Computed per channel on the valid interior (window fully inside the
    image) and averaged; C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    x, _ = _as_hwc(x)
    y, _ = _as_hwc(y)
    if min(x.shape[0], x.shape[1]) < 11:
        raise ValueError("ssim needs spatial dims of at least 11 pixels")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    taps = _gaussian_taps()
    r = 5  # valid-region margin for the 11-tap window
    scores = []
    for ch in range(x.shape[2]):
        xa, yb = x[:, :, ch], y[:, :, ch]
        mu_x = _local_mean(xa, taps)
        mu_y = _local_mean(yb, taps)
        var_x = _local_mean(xa * xa, taps) - mu_x ** 2
        var_y = _local_mean(yb * yb, taps) - mu_y ** 2
        cov = _local_mean(xa * yb, taps) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean((num / den)[r:-r, r:-r]))
    return float(np.mean(scores))
