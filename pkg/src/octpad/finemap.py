"""Saliency maps from decoder activations and saliency-weighted error.

A layer map is the channel mean of one decoder block's activations resized
to the input resolution; the saliency map is the mean of the layer maps,
min-max normalised to [0, 1]. The refined reconstruction error weights both
the input and its reconstruction by that map before taking the norm.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autoencoder import FeatureMapSet
from .bscan_io import BScan, save_bscan
from .preprocess import resize_array

# (max - min) at or below this fraction of max|MAP| counts as a constant map
DEGENERATE_RTOL = 0.05


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("saliency values must be a finite 2-D array within [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def layer_map(f_i: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel mean of a ``(C, h, w)`` activation stack, resized to ``out_h x out_w``."""
    f_i = np.asarray(f_i, dtype=np.float64)
    if f_i.ndim == 2:
        f_i = f_i[None]
    if f_i.ndim != 3 or f_i.shape[0] == 0:
        raise ValueError(f"expected a non-empty (C, h, w) stack, got shape {f_i.shape}")
    return resize_array(f_i, out_h, out_w).mean(axis=0)


def _normalise(m: np.ndarray, rtol: float) -> tuple[np.ndarray, bool]:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= rtol * max(abs(lo), abs(hi)):
        return np.ones_like(m), True
    return (m - lo) / (hi - lo), False


def fine_map(fs: FeatureMapSet | Sequence[np.ndarray], out_h: int, out_w: int,
             rtol: float = DEGENERATE_RTOL) -> SaliencyMap:
    """Average the layer maps and min-max normalise.

    A map whose spread is within ``rtol`` of its magnitude carries no spatial
    information and becomes all ones, so the refined error falls back to the
    raw error.
    """
    layers = list(fs)
    if not layers:
        raise ValueError("feature map set is empty")
    mean = np.mean([layer_map(f, out_h, out_w) for f in layers], axis=0)
    values, degenerate = _normalise(mean, rtol)
    return SaliencyMap(values, degenerate)


def fine_maps_batch(features: Sequence[np.ndarray], out_h: int, out_w: int,
                    rtol: float = DEGENERATE_RTOL) -> list[SaliencyMap]:
    """Saliency maps for a batch given per-layer ``(n, C, h, w)`` arrays."""
    n = features[0].shape[0]
    acc = np.zeros((n, out_h, out_w))
    for f in features:
        acc += resize_array(f, out_h, out_w).mean(axis=1)
    acc /= len(features)
    return [SaliencyMap(*_normalise(m, rtol)) for m in acc]


def refined_error(x: BScan | np.ndarray, xhat: BScan | np.ndarray, saliency: SaliencyMap | np.ndarray) -> float:
    """``||xhat * MAP - x * MAP||_2 / pixel_count``."""
    a = x.pixels if isinstance(x, BScan) else np.asarray(x, dtype=np.float64)
    b = xhat.pixels if isinstance(xhat, BScan) else np.asarray(xhat, dtype=np.float64)
    w = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    if not a.shape == b.shape == w.shape:
        raise ValueError(f"shape mismatch: x {a.shape}, xhat {b.shape}, map {w.shape}")
    return float(np.linalg.norm(b * w - a * w) / a.size)


def export_map(saliency: SaliencyMap, path: str | os.PathLike) -> None:
    """Write the map as an 8-bit PGM for inspection."""
    save_bscan(BScan(saliency.values), path, bit_depth=8)


def saliency_std(maps: Iterable[SaliencyMap]) -> float:
    """Mean per-map standard deviation; near zero for uninformative maps."""
    return float(np.mean([m.values.std() for m in maps]))
