"""Threshold sweeps, Err and TPR@FPR for confidence scores.

Bonafide is the positive class: TPR is the fraction of bonafides accepted and
FPR the fraction of presentation attacks accepted. Err is the lowest
misclassification rate reachable by any threshold.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bscan_io import Label
from .scorer import LARGER_IS_BONAFIDE, LARGER_IS_PA


@dataclass(frozen=True)
class LabeledScore:
    scan_id: str
    truth: Label
    value: float
    polarity: str = LARGER_IS_PA

    def __post_init__(self):
        object.__setattr__(self, "truth", Label(self.truth))
        if not math.isfinite(self.value):
            raise ValueError(f"score for {self.scan_id!r} is not finite")
        if self.polarity not in (LARGER_IS_PA, LARGER_IS_BONAFIDE):
            raise ValueError(f"unknown polarity {self.polarity!r}")


@dataclass
class EvalReport:
    err: float
    tpr_at_fpr10: float
    tpr_at_fpr5: float
    roc: list[tuple[float, float]] = field(default_factory=list)
    best_threshold: float | tuple[float, float] = math.nan


def _split_truth(truth: Sequence[Label]) -> np.ndarray:
    labels = [Label(t) for t in truth]
    if any(t is Label.UNKNOWN for t in labels):
        raise ValueError("evaluation needs ground truth; found Unknown labels")
    is_bona = np.array([t is Label.BONAFIDE for t in labels])
    if is_bona.all() or not is_bona.any():
        raise ValueError("evaluation needs both bonafide and PA samples")
    return is_bona


def _summarise(accept: np.ndarray, is_bona: np.ndarray, thresholds: list) -> EvalReport:
    """``accept`` is (n_thresholds, n_samples), thresholds in sweep order."""
    n_bona, n_pa = int(is_bona.sum()), int((~is_bona).sum())
    tp = (accept & is_bona).sum(axis=1)
    fp = (accept & ~is_bona).sum(axis=1)
    errors = (n_bona - tp) + fp
    best = int(np.argmin(errors))
    tpr, fpr = tp / n_bona, fp / n_pa

    def tpr_at(limit):
        ok = fp <= limit * n_pa + 1e-9
        return float(tpr[ok].max()) if ok.any() else 0.0

    roc = sorted(set(zip(fpr.tolist(), tpr.tolist())))
    return EvalReport(float(errors[best] / len(is_bona)), tpr_at(0.10), tpr_at(0.05),
                      roc, thresholds[best])


def eval_score(scores: Sequence[LabeledScore]) -> EvalReport:
    """Sweep every threshold that changes the confusion matrix.

    Candidate thresholds are the midpoints between consecutive distinct
    values plus both infinities. The reported threshold is in the score's own
    units: for larger-is-PA scores a scan is accepted when ``value < t``, for
    larger-is-bonafide scores when ``value > t``.
    """
    if not scores:
        raise ValueError("no scores to evaluate")
    polarities = {s.polarity for s in scores}
    if len(polarities) != 1:
        raise ValueError("all scores must share one polarity")
    sign = 1.0 if polarities.pop() == LARGER_IS_PA else -1.0
    is_bona = _split_truth([s.truth for s in scores])
    pa_ness = sign * np.array([s.value for s in scores], dtype=np.float64)
    u = np.unique(pa_ness)
    cuts = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    accept = pa_ness[None, :] < cuts[:, None]
    return _summarise(accept, is_bona, [float(sign * c) for c in cuts])


def eval_ms(pairs: Sequence[tuple[float, float, Label]]) -> EvalReport:
    """Evaluate the two-score veto rule with tied thresholds ``s_thres = m_thres = t``.

    ``t`` sweeps every observed s and m value plus ``-inf``; a scan is accepted
    when both of its scores are ``<= t``.
    """
    if not pairs:
        raise ValueError("no scores to evaluate")
    s = np.array([p[0] for p in pairs], dtype=np.float64)
    m = np.array([p[1] for p in pairs], dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(m))):
        raise ValueError("MS evaluation needs finite scores")
    is_bona = _split_truth([p[2] for p in pairs])
    ts = np.concatenate([[-np.inf], np.unique(np.concatenate([s, m]))])
    accept = (s[None, :] <= ts[:, None]) & (m[None, :] <= ts[:, None])
    return _summarise(accept, is_bona, [(float(t), float(t)) for t in ts])


def format_threshold(t) -> str:
    if isinstance(t, tuple):
        return "/".join(repr(float(v)) for v in t)
    return repr(float(t))


def export_report(r: EvalReport, path: str | os.PathLike) -> None:
    """Write ROC points as CSV followed by a ``# err=...`` summary line."""
    lines = ["fpr,tpr"] + [f"{f!r},{t!r}" for f, t in r.roc]
    lines.append(f"# err={r.err!r} tpr@0.10={r.tpr_at_fpr10!r} tpr@0.05={r.tpr_at_fpr5!r} "
                 f"threshold={format_threshold(r.best_threshold)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(path: str | os.PathLike) -> EvalReport:
    roc, summary = [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            summary = dict(tok.split("=", 1) for tok in line[1:].split())
        elif line and line != "fpr,tpr":
            f, t = line.split(",")
            roc.append((float(f), float(t)))
    thr = summary["threshold"]
    threshold = tuple(float(v) for v in thr.split("/")) if "/" in thr else float(thr)
    return EvalReport(float(summary["err"]), float(summary["tpr@0.10"]), float(summary["tpr@0.05"]),
                      roc, threshold)
