"""Per-scan Gaussian models of refined errors and the nine confidence scores.

Each scan volume is summarised by the Gaussian (mean, population std) of its
B-scans' refined reconstruction errors. A bonafide score set supplies the
normalising statistics for the mean/std scores and a pooled Gaussian against
which test scans are compared by density, KL divergence and overlap.
"""
from __future__ import annotations

import configparser
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from .autoencoder import AutoencoderModel, ReconRecord, model_digest, reconstruct_stack
from .bscan_io import Label, ScanVolume
from .errors import CalibrationDegenerateError, DegenerateDensityError, ZeroPAViolation
from .finemap import fine_maps_batch, refined_error
from .preprocess import PreprocessConfig, preprocess_array

log = logging.getLogger(__name__)

DEGENERATE_ATOL = 1e-12
IOU_GRID_POINTS = 8193

SCORE_FIELDS = ("s_score", "m_score", "sm_score", "ms_decision",
                "pd_postp", "pd_prep", "kl_pre", "kl_post", "iou_score")
NUMERIC_SCORES = tuple(f for f in SCORE_FIELDS if f != "ms_decision")
LARGER_IS_PA = "larger_is_pa"
LARGER_IS_BONAFIDE = "larger_is_bonafide"
POLARITY = {
    "s_score": LARGER_IS_PA, "m_score": LARGER_IS_PA, "sm_score": LARGER_IS_PA,
    "kl_pre": LARGER_IS_PA, "kl_post": LARGER_IS_PA,
    "pd_postp": LARGER_IS_BONAFIDE, "pd_prep": LARGER_IS_BONAFIDE, "iou_score": LARGER_IS_BONAFIDE,
}


@dataclass(frozen=True)
class ScanGaussian:
    m: float
    s: float
    n: int = 1

    def pdf(self, x) -> np.ndarray:
        if self.s <= 0:
            raise DegenerateDensityError("density of a zero-variance Gaussian")
        z = (np.asarray(x, dtype=np.float64) - self.m) / self.s
        return np.exp(-0.5 * z * z) / (self.s * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class ScoreCalibration:
    m_bar: float
    m_max: float
    s_bar: float
    s_max: float
    pooled: ScanGaussian
    n_volumes: int = 0
    model_sha256: str = ""

    def check(self) -> None:
        if self.m_max - self.m_bar <= DEGENERATE_ATOL or self.s_max - self.s_bar <= DEGENERATE_ATOL:
            raise CalibrationDegenerateError(
                f"score set cannot normalise scores: m_max-m_bar={self.m_max - self.m_bar:.3g}, "
                f"s_max-s_bar={self.s_max - self.s_bar:.3g}")


@dataclass(frozen=True)
class Thresholds:
    s_thres: float = 1.0
    m_thres: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.s_thres) and math.isfinite(self.m_thres)):
            raise ValueError("thresholds must be finite")


@dataclass
class ConfidenceReport:
    """All confidence scores for one scan volume.

    ``kl_pre``, ``kl_post`` and ``iou_score`` are ``None`` when the test scan's
    errors have zero spread (``degenerate`` is then True).
    """

    scan_id: str
    truth: Label
    s_score: float
    m_score: float
    sm_score: float
    ms_decision: Label
    pd_postp: float
    pd_prep: float
    kl_pre: float | None
    kl_post: float | None
    iou_score: float | None
    degenerate: bool = False
    gaussian: ScanGaussian | None = None

    polarity = POLARITY


def fit_scan_gaussian(errors: Sequence[float]) -> ScanGaussian:
    """Maximum-likelihood Gaussian: sample mean and population (divisor n) std."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("cannot fit a Gaussian to an empty error list")
    m = float(e.mean())
    return ScanGaussian(m, float(np.sqrt(np.mean((e - m) ** 2))), int(e.size))


def pooled_gaussian(per_volume: Sequence[Sequence[float]]) -> ScanGaussian:
    """Gaussian fit over every error of every volume, concatenated."""
    if not per_volume:
        raise ValueError("no volumes to pool")
    return fit_scan_gaussian(np.concatenate([np.asarray(e, dtype=np.float64).ravel() for e in per_volume]))


def calibrate_from_errors(per_volume: Sequence[Sequence[float]], model_sha256: str = "") -> ScoreCalibration:
    """Build calibration statistics from each score-set volume's refined errors."""
    if not per_volume:
        raise CalibrationDegenerateError("empty score set")
    gs = [fit_scan_gaussian(e) for e in per_volume]
    ms = np.array([g.m for g in gs])
    ss = np.array([g.s for g in gs])
    pooled = pooled_gaussian(per_volume)
    cal = ScoreCalibration(float(ms.mean()), float(ms.max()), float(ss.mean()), float(ss.max()),
                           pooled, len(gs), model_sha256)
    cal.check()
    return cal


def volume_errors(model: AutoencoderModel, v: ScanVolume, pre_cfg: PreprocessConfig,
                  use_finemap: bool = True) -> list[ReconRecord]:
    """Preprocess, reconstruct and measure raw and refined error per B-scan.

    With ``use_finemap=False`` the refined error equals the raw error.
    """
    x = np.stack([preprocess_array(b.pixels, pre_cfg) for b in v.bscans])
    recon, feats = reconstruct_stack(model, x)
    h, w = x.shape[1:]
    maps = fine_maps_batch(feats, h, w) if use_finemap else None
    records = []
    for i in range(len(x)):
        raw = float(np.linalg.norm(recon[i] - x[i]) / x[i].size)
        refined = refined_error(x[i], recon[i], maps[i]) if use_finemap else raw
        records.append(ReconRecord(v.scan_id, i, raw, refined))
    return records


def calibrate(score_volumes: Sequence[ScanVolume], model: AutoencoderModel, pre_cfg: PreprocessConfig,
              use_finemap: bool = True) -> ScoreCalibration:
    for v in score_volumes:
        if v.label is not Label.BONAFIDE:
            raise ZeroPAViolation(f"volume {v.scan_id!r} labelled {v.label.value} in the score set")
    per_volume = [[r.refined_error for r in volume_errors(model, v, pre_cfg, use_finemap)]
                  for v in score_volumes]
    return calibrate_from_errors(per_volume, model_digest(model))


def m_score(test: ScanGaussian, cal: ScoreCalibration) -> float:
    cal.check()
    return abs(test.m - cal.m_bar) / (cal.m_max - cal.m_bar)


def s_score(test: ScanGaussian, cal: ScoreCalibration) -> float:
    cal.check()
    return abs(test.s - cal.s_bar) / (cal.s_max - cal.s_bar)


def sm_score(s: float, m: float) -> float:
    return 0.5 * (s + m)


def ms_decide(s: float, m: float, t: Thresholds) -> Label:
    """Bonafide only if both scores are within their thresholds; either can veto."""
    return Label.BONAFIDE if s <= t.s_thres and m <= t.m_thres else Label.PA


def pd_postp(test_errors: Sequence[float], cal: ScoreCalibration) -> float:
    """Mean of the pooled score-set density over the test errors."""
    e = np.asarray(test_errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no test errors")
    return float(np.mean(cal.pooled.pdf(e)))


def pd_prep(test_errors: Sequence[float], cal: ScoreCalibration) -> float:
    """Pooled score-set density at the mean test error."""
    e = np.asarray(test_errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no test errors")
    return float(cal.pooled.pdf(e.mean()))


def kl_divergence(p: ScanGaussian, q: ScanGaussian) -> float:
    """Closed-form KL(p || q) between univariate Gaussians."""
    if p.s <= 0 or q.s <= 0:
        raise DegenerateDensityError("KL divergence needs positive standard deviations")
    kl = math.log(q.s / p.s) + (p.s ** 2 + (p.m - q.m) ** 2) / (2.0 * q.s ** 2) - 0.5
    return max(kl, 0.0)


def iou_score(p: ScanGaussian, q: ScanGaussian, points: int = IOU_GRID_POINTS) -> float:
    """Overlap of two Gaussian densities over their union, by trapezoidal integration."""
    if p.s <= 0 or q.s <= 0:
        raise DegenerateDensityError("IoU needs positive standard deviations")
    sigma = max(p.s, q.s)
    grid = np.linspace(min(p.m, q.m) - 8 * sigma, max(p.m, q.m) + 8 * sigma, max(points, 4096))
    ov = float(trapezoid(np.minimum(p.pdf(grid), q.pdf(grid)), grid))
    ov = min(max(ov, 0.0), 1.0)
    return ov / (2.0 - ov)


def score_errors(scan_id: str, errors: Sequence[float], cal: ScoreCalibration, t: Thresholds,
                 truth: Label = Label.UNKNOWN) -> ConfidenceReport:
    """Every confidence score for one scan given its refined errors."""
    g = fit_scan_gaussian(errors)
    s, m = s_score(g, cal), m_score(g, cal)
    degenerate = g.s <= 0
    if degenerate:
        kl_pre = kl_post = iou = None
    else:
        kl_pre = kl_divergence(cal.pooled, g)
        kl_post = kl_divergence(g, cal.pooled)
        iou = iou_score(cal.pooled, g)
    return ConfidenceReport(scan_id, Label(truth), s, m, sm_score(s, m), ms_decide(s, m, t),
                            pd_postp(errors, cal), pd_prep(errors, cal), kl_pre, kl_post, iou,
                            degenerate, g)


def score_volume(v: ScanVolume, model: AutoencoderModel, pre_cfg: PreprocessConfig,
                 cal: ScoreCalibration, t: Thresholds, use_finemap: bool = True) -> ConfidenceReport:
    errors = [r.refined_error for r in volume_errors(model, v, pre_cfg, use_finemap)]
    return score_errors(v.scan_id, errors, cal, t, v.label)


# --------------------------------------------------------------------------
# Calibration files: "key = value" lines.

_CAL_FLOATS = ("m_bar", "m_max", "s_bar", "s_max", "pooled_m", "pooled_s")


def save_calibration(cal: ScoreCalibration, path: str | os.PathLike) -> None:
    values = {"m_bar": cal.m_bar, "m_max": cal.m_max, "s_bar": cal.s_bar, "s_max": cal.s_max,
              "pooled_m": cal.pooled.m, "pooled_s": cal.pooled.s}
    lines = ["# score-set calibration"]
    lines += [f"{k} = {values[k]!r}" for k in _CAL_FLOATS]
    lines += [f"pooled_n = {cal.pooled.n}", f"n_volumes = {cal.n_volumes}",
              f"model_sha256 = {cal.model_sha256}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_calibration(path: str | os.PathLike, expected_sha256: str | None = None) -> ScoreCalibration:
    """Read a calibration file; warns if it was built with a different checkpoint."""
    parser = configparser.ConfigParser()
    parser.read_string("[calibration]\n" + Path(path).read_text(encoding="utf-8"))
    sec = parser["calibration"]
    f = {k: float(sec[k]) for k in _CAL_FLOATS}
    cal = ScoreCalibration(f["m_bar"], f["m_max"], f["s_bar"], f["s_max"],
                           ScanGaussian(f["pooled_m"], f["pooled_s"], int(sec.get("pooled_n", "1"))),
                           int(sec.get("n_volumes", "0")), sec.get("model_sha256", ""))
    if expected_sha256 is not None and cal.model_sha256 != expected_sha256:
        msg = (f"calibration {path} was built with checkpoint {cal.model_sha256[:12] or '?'}, "
               f"current checkpoint is {expected_sha256[:12]}")
        log.warning(msg)
        warnings.warn(msg, stacklevel=2)
    return cal


def report_row(r: ConfidenceReport) -> dict:
    row = {"scan_id": r.scan_id, "truth": r.truth.value}
    for k in SCORE_FIELDS:
        v = getattr(r, k)
        row[k] = v.value if isinstance(v, Label) else v
    return row

