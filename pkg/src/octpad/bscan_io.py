"""B-scan and scan-volume types, PGM image I/O and dataset manifests.

Images are stored as binary PGM (P5), 8- or 16-bit. A manifest is a
tab-separated text file with one scan volume per line::

    scan_id<TAB>label<TAB>split<TAB>path1,path2,...

Relative image paths are resolved against the manifest's directory and lines
starting with ``#`` are ignored.
"""
from __future__ import annotations

import enum
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, FormatError, ManifestError, ZeroPAViolation


class Label(str, enum.Enum):
    BONAFIDE = "Bonafide"
    PA = "PA"
    UNKNOWN = "Unknown"


SPLITS = ("model", "score", "test")


@dataclass(frozen=True, eq=False)
class BScan:
    """One grayscale cross-section image, intensities in [0, 1].

    ``pixels`` is a float64 array of shape ``(height, width)``.
    """

    pixels: np.ndarray
    scan_id: str = ""
    index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"B-scan pixels must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("B-scan intensities must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "BScan":
        return BScan(pixels, scan_id=self.scan_id, index=self.index)


@dataclass(frozen=True, eq=False)
class ScanVolume:
    """Ordered B-scans from one scan of a fingertip or PAI."""

    scan_id: str
    label: Label
    bscans: tuple[BScan, ...]

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "bscans", tuple(self.bscans))
        if not self.bscans:
            raise ValueError(f"scan volume {self.scan_id!r} is empty")
        shape = self.bscans[0].pixels.shape
        for i, b in enumerate(self.bscans):
            if b.pixels.shape != shape:
                raise ValueError(f"scan volume {self.scan_id!r}: B-scan {i} has shape "
                                 f"{b.pixels.shape}, expected {shape}")
            if b.index != i:
                raise ValueError(f"scan volume {self.scan_id!r}: B-scan indices must be 0..n-1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bscans[0].pixels.shape

    def __len__(self) -> int:
        return len(self.bscans)

    def stack(self) -> np.ndarray:
        """All B-scans as an ``(n, height, width)`` array."""
        return np.stack([b.pixels for b in self.bscans])

    @classmethod
    def from_arrays(cls, scan_id: str, label: Label | str, arrays: Iterable[np.ndarray]) -> "ScanVolume":
        return cls(scan_id, Label(label),
                   tuple(BScan(a, scan_id=scan_id, index=i) for i, a in enumerate(arrays)))


@dataclass(frozen=True)
class DatasetSplit:
    """Zero-PA partition: bonafide-only model and score sets plus a test set."""

    model_set: tuple[str, ...] = ()
    score_set: tuple[str, ...] = ()
    test_set: tuple[str, ...] = ()

    def validate(self, labels: dict[str, Label]) -> None:
        """Check disjointness and that model/score volumes are bonafide."""
        model, score, test = set(self.model_set), set(self.score_set), set(self.test_set)
        if model & score or (model | score) & test:
            raise ManifestError("model, score and test sets must be disjoint")
        for sid in sorted(model | score):
            if labels[sid] is not Label.BONAFIDE:
                raise ZeroPAViolation(
                    f"volume {sid!r} labelled {labels[sid].value} is in a bonafide-only split")


# --------------------------------------------------------------------------
# PGM

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm_header(data: bytes) -> tuple[int, int, int, int]:
    if data[:2] != b"P5":
        raise FormatError(f"unsupported image magic {data[:2]!r}; only binary PGM (P5) is read")
    pos = 2
    values = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated or malformed PGM header")
        tok = m.group(1)
        if not tok.isdigit():
            raise FormatError(f"non-numeric PGM header field {tok!r}")
        values.append(int(tok))
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("PGM header must end with a single whitespace byte")
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PGM dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid PGM maxval {maxval}")
    return width, height, maxval, pos + 1


def load_bscan(path: str | os.PathLike, scan_id: str = "", index: int = 0) -> BScan:
    """Read a P5 PGM file, scaling intensities by the file's maxval."""
    data = Path(path).read_bytes()
    width, height, maxval, offset = _parse_pgm_header(data)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if raw.max(initial=0) > maxval:
        raise CorruptionError(f"{path}: sample exceeds maxval {maxval}")
    return BScan(raw.astype(np.float64) / maxval, scan_id=scan_id, index=index)


def save_bscan(b: BScan | np.ndarray, path: str | os.PathLike, bit_depth: int = 8) -> None:
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    pixels = b.pixels if isinstance(b, BScan) else BScan(b).pixels
    maxval = (1 << bit_depth) - 1
    dtype = ">u2" if bit_depth == 16 else "u1"
    q = np.rint(pixels * maxval).astype(dtype)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


# --------------------------------------------------------------------------
# Manifests

@dataclass
class ManifestEntry:
    scan_id: str
    label: Label
    split: str
    paths: list[str] = field(default_factory=list)


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Parse manifest lines without loading any images."""
    entries = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        scan_id, label, split, paths = (p.strip() for p in parts)
        if scan_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate scan_id {scan_id!r}")
        seen.add(scan_id)
        try:
            label = Label(label)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: unknown label {label!r}") from None
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if split in ("model", "score") and label is not Label.BONAFIDE:
            raise ZeroPAViolation(f"{path}:{lineno}: {label.value} volume {scan_id!r} tagged {split}")
        files = [p for p in paths.split(",") if p]
        if not files:
            raise ManifestError(f"{path}:{lineno}: volume {scan_id!r} lists no B-scan files")
        entries.append(ManifestEntry(scan_id, label, split, files))
    return entries


def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> None:
    lines = ["# scan_id\tlabel\tsplit\tpaths"]
    for e in entries:
        lines.append("\t".join([e.scan_id, Label(e.label).value, e.split, ",".join(e.paths)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | os.PathLike,
                  splits: Sequence[str] = SPLITS) -> tuple[list[ScanVolume], DatasetSplit]:
    """Load every volume listed in ``path`` and its zero-PA split.

    Volumes are returned sorted by ``scan_id`` so the result does not depend on
    row order. ``splits`` restricts which volumes have their images read; the
    returned split always lists every id.
    """
    base = Path(path).parent
    entries = read_manifest(path)
    volumes = {}
    for e in entries:
        if e.split not in splits:
            continue
        bscans = tuple(load_bscan(base / p, scan_id=e.scan_id, index=i) for i, p in enumerate(e.paths))
        try:
            volumes[e.scan_id] = ScanVolume(e.scan_id, e.label, bscans)
        except ValueError as exc:
            raise ManifestError(str(exc)) from None
    by_split = {s: tuple(sorted(e.scan_id for e in entries if e.split == s)) for s in SPLITS}
    split = DatasetSplit(by_split["model"], by_split["score"], by_split["test"])
    split.validate({e.scan_id: e.label for e in entries})
    return [volumes[k] for k in sorted(volumes)], split


def select(volumes: Sequence[ScanVolume], ids: Iterable[str]) -> list[ScanVolume]:
    wanted = set(ids)
    return [v for v in volumes if v.scan_id in wanted]
