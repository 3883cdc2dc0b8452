"""Deterministic synthetic OCT fingertip phantoms.

Every A-line (image column) is a sum of Gaussian bands in depth over a dark
floor, followed by multiplicative speckle. Bonafide scans show two bands
(epidermis and dermis). The presentation-attack presets show one thin band
(2D print), one thick flat-topped band (pressed 3D mould), a flat lens
reflection above a distant band (unpressed 3D mould) or almost no signal
(transparent material). Depths and widths are fractions of the image height
so presets look alike at any resolution.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bscan_io import DatasetSplit, Label, ManifestEntry, ScanVolume, save_bscan, write_manifest
from .errors import ZeroPAViolation

BONAFIDE = "Bonafide"
PAI_2D = "PAI-2D"
PAI_3D_PRESSED = "PAI-3D-pressed"
PAI_3D_UNPRESSED = "PAI-3D-unpressed"
PAI_TRANSPARENT = "PAI-transparent"
PRESETS = (BONAFIDE, PAI_2D, PAI_3D_PRESSED, PAI_3D_UNPRESSED, PAI_TRANSPARENT)
DEFAULT_PAI_PRESETS = (PAI_2D, PAI_3D_PRESSED, PAI_3D_UNPRESSED)

FLOOR = 0.03


@dataclass(frozen=True)
class SynthParams:
    seed: int = 7
    height: int = 64
    width: int = 192
    bscans_per_volume: int = 16
    preset: str = BONAFIDE
    speckle_sigma: float = 0.1
    layer_jitter: float = 0.5

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("phantom dimensions must be positive")
        if self.bscans_per_volume < 1:
            raise ValueError("bscans_per_volume must be >= 1")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.speckle_sigma < 0 or self.layer_jitter < 0:
            raise ValueError("speckle_sigma and layer_jitter must be >= 0")

    @property
    def label(self) -> Label:
        return Label.BONAFIDE if self.preset == BONAFIDE else Label.PA


def _band(z: np.ndarray, centre: np.ndarray, width: float, power: int = 2) -> np.ndarray:
    """Peak-1 band profile; ``power > 2`` gives a flat top."""
    return np.exp(-0.5 * np.abs((z - centre) / width) ** power)


def _surface(rng: np.random.Generator, width: int, height: int, amp: float, ridge_amp: float):
    """Returns f(k) giving the surface depth offset per column for B-scan k."""
    x = np.arange(width) / width
    freq = rng.uniform(0.8, 1.6)
    phase = rng.uniform(0, 2 * np.pi)
    a = amp * height * rng.uniform(0.6, 1.0)
    ridge_freq = rng.uniform(8.0, 12.0)
    ridge_phase = rng.uniform(0, 2 * np.pi)

    def offset(k: int) -> np.ndarray:
        return (a * np.sin(2 * np.pi * freq * x + phase + 0.05 * k)
                + ridge_amp * height * np.sin(2 * np.pi * ridge_freq * x + ridge_phase + 0.3 * k))

    return offset


def _render(p: SynthParams, rng: np.random.Generator) -> list[np.ndarray]:
    H, W = p.height, p.width
    z = np.arange(H, dtype=np.float64)[:, None]
    preset = p.preset
    top = rng.uniform(0.20, 0.30) * H
    if preset == BONAFIDE:
        surface = _surface(rng, W, H, amp=0.04, ridge_amp=0.01)
        sep = rng.uniform(0.18, 0.25) * H
        a1, a2 = rng.uniform(0.75, 0.95), rng.uniform(0.55, 0.75)
        w1, w2 = 0.03 * H, 0.05 * H
    elif preset == PAI_2D:
        surface = _surface(rng, W, H, amp=0.01, ridge_amp=0.005)
        a1, w1 = rng.uniform(0.7, 0.9), rng.uniform(0.03, 0.04) * H
    elif preset == PAI_3D_PRESSED:
        surface = _surface(rng, W, H, amp=0.01, ridge_amp=0.01)
        a1, w1 = rng.uniform(0.6, 0.8), rng.uniform(0.07, 0.09) * H
    elif preset == PAI_3D_UNPRESSED:
        surface = _surface(rng, W, H, amp=0.04, ridge_amp=0.01)
        lens = rng.uniform(0.08, 0.12) * H
        depth = rng.uniform(0.55, 0.65) * H
        a1, a2 = rng.uniform(0.8, 0.95), rng.uniform(0.5, 0.7)
        w2 = 0.04 * H
    else:  # transparent: almost nothing comes back
        surface = _surface(rng, W, H, amp=0.02, ridge_amp=0.005)
        a1, w1 = rng.uniform(0.02, 0.04), 0.03 * H

    images = []
    for k in range(p.bscans_per_volume):
        jitter = rng.normal(0.0, p.layer_jitter, size=W) if p.layer_jitter > 0 else np.zeros(W)
        zs = surface(k) + jitter
        if preset == BONAFIDE:
            img = a1 * _band(z, top + zs, w1) + a2 * _band(z, top + sep + zs, w2)
        elif preset in (PAI_2D, PAI_TRANSPARENT):
            img = a1 * _band(z, top + zs, w1)
        elif preset == PAI_3D_PRESSED:
            img = a1 * _band(z, top + zs, w1, power=6)
        else:
            line = np.full(W, lens)
            img = a1 * _band(z, line, 0.012 * H) + a2 * _band(z, depth + zs, w2)
        img = FLOOR + img
        if p.speckle_sigma > 0:
            img = img * (1.0 + p.speckle_sigma * rng.standard_normal(img.shape))
        images.append(np.clip(img, 0.0, 1.0))
    return images


def generate_volume(p: SynthParams, scan_id: str | None = None) -> ScanVolume:
    """Render one scan volume; identical params give identical pixels."""
    rng = np.random.default_rng(p.seed)
    return ScanVolume.from_arrays(scan_id or f"{p.preset}-{p.seed}", p.label, _render(p, rng))


def _sub_seed(seed: int, ordinal: int) -> int:
    return int(np.random.SeedSequence([seed, ordinal]).generate_state(1)[0])


_SHORT = {BONAFIDE: "bona", PAI_2D: "pai2d", PAI_3D_PRESSED: "pai3dp",
          PAI_3D_UNPRESSED: "pai3du", PAI_TRANSPARENT: "paitr"}


def plan_dataset(counts: dict[str, int], pai_presets: Sequence[str] = DEFAULT_PAI_PRESETS):
    """List ``(scan_id, split, preset)`` for the requested counts.

    ``counts`` keys: ``model``, ``score``, ``test_bona``, ``test_pai``. Test
    PAIs cycle through ``pai_presets``.
    """
    for key in ("model_pai", "score_pai"):
        if counts.get(key):
            raise ZeroPAViolation(f"presentation attacks cannot be placed in the {key.split('_')[0]} split")
    plan = []
    for split, key in (("model", "model"), ("score", "score"), ("test", "test_bona")):
        for i in range(counts.get(key, 0)):
            plan.append((f"{split}_bona_{i:03d}", split, BONAFIDE))
    for i in range(counts.get("test_pai", 0)):
        preset = pai_presets[i % len(pai_presets)]
        if preset == BONAFIDE:
            raise ValueError("pai_presets must not contain the bonafide preset")
        plan.append((f"test_{_SHORT[preset]}_{i:03d}", "test", preset))
    return plan


def generate_dataset(out_dir: str | os.PathLike, seed: int, counts: dict[str, int], p: SynthParams | None = None,
                     pai_presets: Sequence[str] = DEFAULT_PAI_PRESETS, bit_depth: int = 8):
    """Render volumes, write them as PGM files and return ``(volumes, split, manifest_path)``.

    Each volume gets its own seed derived from ``seed`` and its position in
    the plan, so outputs are byte-identical for identical arguments.
    """
    p = p or SynthParams(seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    volumes, entries = [], []
    for ordinal, (scan_id, split, preset) in enumerate(plan_dataset(counts, pai_presets)):
        vp = replace(p, seed=_sub_seed(seed, ordinal), preset=preset)
        vol = generate_volume(vp, scan_id)
        rel_dir = Path("bscans") / scan_id
        (out / rel_dir).mkdir(parents=True, exist_ok=True)
        paths = []
        for b in vol.bscans:
            rel = rel_dir / f"b{b.index:03d}.pgm"
            save_bscan(b, out / rel, bit_depth=bit_depth)
            paths.append(rel.as_posix())
        volumes.append(vol)
        entries.append(ManifestEntry(scan_id, vol.label, split, paths))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    split = DatasetSplit(*(tuple(sorted(e.scan_id for e in entries if e.split == s))
                           for s in ("model", "score", "test")))
    split.validate({e.scan_id: e.label for e in entries})
    return volumes, split, manifest
