"""Resize and Non-Local Means denoising of B-scans."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import uniform_filter

from .bscan_io import BScan, ScanVolume
from .errors import ConfigError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocessConfig:
    target_height: int = 256
    target_width: int = 768
    nlm_filter_strength: float = 19.0
    nlm_template: int = 7
    nlm_search: int = 21
    denoise_enabled: bool = True

    def __post_init__(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ConfigError("target dimensions must be positive")
        if self.nlm_filter_strength <= 0:
            raise ConfigError("nlm_filter_strength must be positive")
        if self.nlm_template % 2 == 0 or self.nlm_search % 2 == 0:
            raise ConfigError("NLM template and search windows must be odd")
        if not 0 < self.nlm_template <= self.nlm_search:
            raise ConfigError("NLM template window must not exceed the search window")

    @property
    def h(self) -> float:
        """Filter strength rescaled from 8-bit units to [0, 1] intensities."""
        return self.nlm_filter_strength / 255.0

    def with_(self, **changes) -> "PreprocessConfig":
        return replace(self, **changes)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion of an ``(H, W, 3)`` array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) array, got {rgb.shape}")
    return rgb @ np.asarray(LUMA_WEIGHTS)


def _axis_taps(n_in: int, n_out: int):
    # half-pixel centres, clamped at both edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes of ``arr``.

    Output values are clipped to the input's [min, max] so rounding can never
    push them outside the source range.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    arr = np.asarray(arr, dtype=np.float64)
    in_h, in_w = arr.shape[-2:]
    y0, y1, wy = _axis_taps(in_h, out_h)
    x0, x1, wx = _axis_taps(in_w, out_w)
    rows = arr[..., y0, :] + wy[:, None] * (arr[..., y1, :] - arr[..., y0, :])
    out = rows[..., x0] + wx * (rows[..., x1] - rows[..., x0])
    return np.clip(out, arr.min(), arr.max())


def resize_bilinear(img: BScan, out_h: int, out_w: int) -> BScan:
    return img.with_pixels(resize_array(img.pixels, out_h, out_w))


def nlm_array(img: np.ndarray, h: float, template: int = 7, search: int = 21) -> np.ndarray:
    """Non-Local Means on a 2-D float array, clamp-to-edge boundaries.

    Each pixel becomes the weighted mean of the pixels in its ``search`` window
    with weights ``exp(-d2 / h**2)``, where ``d2`` is the mean squared difference
    between the two ``template``-sized patches.
    """
    img = np.asarray(img, dtype=np.float64)
    height, width = img.shape
    if height < template or width < template:
        raise ValueError(f"image {height}x{width} is smaller than the {template}x{template} template")
    t, s = template // 2, search // 2
    pad = s + t
    padded = np.pad(img, pad, mode="edge")
    ph, pw = height + 2 * t, width + 2 * t
    centre = padded[s:s + ph, s:s + pw]
    inv_h2 = 1.0 / (h * h)
    acc = np.zeros_like(img)
    wsum = np.zeros_like(img)
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            shifted = padded[s + dy:s + dy + ph, s + dx:s + dx + pw]
            d2 = uniform_filter((centre - shifted) ** 2, size=template, mode="constant")[t:t + height, t:t + width]
            w = np.exp(-d2 * inv_h2)
            acc += w * (shifted[t:t + height, t:t + width] - img)
            wsum += w
    # accumulating offsets from the centre keeps flat regions bit-exact
    return np.clip(img + acc / wsum, 0.0, 1.0)


def nlm_denoise(img: BScan, cfg: PreprocessConfig) -> BScan:
    return img.with_pixels(nlm_array(img.pixels, cfg.h, cfg.nlm_template, cfg.nlm_search))


def preprocess_array(pixels: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    out = resize_array(pixels, cfg.target_height, cfg.target_width)
    if cfg.denoise_enabled:
        out = nlm_array(out, cfg.h, cfg.nlm_template, cfg.nlm_search)
    return out


def preprocess_volume(v: ScanVolume, cfg: PreprocessConfig) -> ScanVolume:
    """Resize then (optionally) denoise every B-scan; label and order are kept."""
    return ScanVolume(v.scan_id, v.label,
                      tuple(b.with_pixels(preprocess_array(b.pixels, cfg)) for b in v.bscans))
