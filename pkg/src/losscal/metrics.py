"""Detection metrics over inlier/outlier confidence scores, plus
classification metrics.

Convention throughout: inliers are positives and a sample is called an
inlier when ``score >= threshold``.  Sweeps run over the distinct observed
scores, so tied scores always move together.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

TABLE_COLUMNS = ("fpr_at_tpr95", "dterr", "auroc", "aupr_in", "aupr_out")


@dataclass
class ScoreSet:
    in_scores: np.ndarray
    out_scores: np.ndarray

    def __post_init__(self):
        self.in_scores = np.asarray(self.in_scores, dtype=np.float64).ravel()
        self.out_scores = np.asarray(self.out_scores, dtype=np.float64).ravel()
        if self.in_scores.size == 0 or self.out_scores.size == 0:
            raise ValueError("both inlier and outlier score lists must be nonempty")


@dataclass
class DetectionReport:
    fpr_at_tpr95: float
    dterr: float
    auroc: float
    aupr_in: float
    aupr_out: float
    n_in: int
    n_out: int

    def as_row(self, tag, percent=True):
        scale = 100.0 if percent else 1.0
        return [tag] + [f"{getattr(self, c) * scale:.4f}" for c in TABLE_COLUMNS]


def _as_scoreset(scores, out_scores=None):
    if isinstance(scores, ScoreSet):
        return scores
    return ScoreSet(scores, out_scores)


def _sweep(s: ScoreSet):
    """Counts at each distinct threshold, descending.

    Returns ``(thresholds, tp, fp)`` where ``tp[k]``/``fp[k]`` count inliers
    and outliers with score ``>= thresholds[k]``.
    """
    thr = np.unique(np.concatenate([s.in_scores, s.out_scores]))[::-1]
    ins = np.sort(s.in_scores)
    outs = np.sort(s.out_scores)
    tp = ins.size - np.searchsorted(ins, thr, side="left")
    fp = outs.size - np.searchsorted(outs, thr, side="left")
    return thr, tp, fp


def fpr_at_tpr95(scores, out_scores=None):
    """FPR at the largest threshold whose TPR reaches 95%."""
    s = _as_scoreset(scores, out_scores)
    n_in = s.in_scores.size
    need = -(-95 * n_in // 100)  # ceil(0.95 n) in exact integer arithmetic
    tau = np.sort(s.in_scores)[::-1][need - 1]
    return float(np.count_nonzero(s.out_scores >= tau) / s.out_scores.size)


def tpr95_threshold(in_scores):
    ins = np.sort(np.asarray(in_scores, dtype=np.float64).ravel())[::-1]
    return float(ins[-(-95 * ins.size // 100) - 1])


def detection_error(scores, out_scores=None):
    """Minimum of ``0.5 (1 - TPR) + 0.5 FPR`` over all thresholds."""
    s = _as_scoreset(scores, out_scores)
    _, tp, fp = _sweep(s)
    tpr = tp / s.in_scores.size
    fpr = fp / s.out_scores.size
    err = 0.5 * (1.0 - tpr) + 0.5 * fpr
    # +inf threshold (reject all) gives 0.5; -inf (accept all) gives 0.5 too
    return float(min(err.min(), 0.5))


def auroc(scores, out_scores=None):
    """P(inlier score > outlier score) with ties counted half."""
    s = _as_scoreset(scores, out_scores)
    outs = np.sort(s.out_scores)
    below = np.searchsorted(outs, s.in_scores, side="left")
    at_or_below = np.searchsorted(outs, s.in_scores, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (s.in_scores.size * s.out_scores.size))


def aupr(scores, out_scores=None, positive="in"):
    """Step-wise area under precision/recall: ``sum (R_k - R_{k-1}) P_k``."""
    s = _as_scoreset(scores, out_scores)
    if positive == "out":
        s = ScoreSet(-s.out_scores, -s.in_scores)
    elif positive != "in":
        raise ValueError("positive must be 'in' or 'out'")
    _, tp, fp = _sweep(s)
    precision = tp / (tp + fp)
    recall = tp / s.in_scores.size
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float((steps * precision).sum())


def detection_report(scores, out_scores=None):
    s = _as_scoreset(scores, out_scores)
    return DetectionReport(
        fpr_at_tpr95=fpr_at_tpr95(s),
        dterr=detection_error(s),
        auroc=auroc(s),
        aupr_in=aupr(s, positive="in"),
        aupr_out=aupr(s, positive="out"),
        n_in=int(s.in_scores.size),
        n_out=int(s.out_scores.size),
    )


def write_table(rows, path, percent=True):
    """``rows`` is an iterable of (tag, DetectionReport); columns follow the OOD table layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", *TABLE_COLUMNS])
        for tag, rep in rows:
            w.writerow(rep.as_row(tag, percent))


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _check_pred(predictions, labels):
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    return p, y


def per_class_sensitivity(predictions, labels, k):
    """Recall per class; NaN marks classes absent from ``labels``."""
    p, y = _check_pred(predictions, labels)
    out = np.full(k, np.nan)
    for c in range(k):
        rows = y == c
        if rows.any():
            out[c] = np.mean(p[rows] == c)
    return out


def balanced_accuracy(predictions, labels, k):
    sens = per_class_sensitivity(predictions, labels, k)
    if np.all(np.isnan(sens)):
        raise ValueError("no labels given")
    return float(np.nanmean(sens))


def report_dict(rep: DetectionReport):
    return asdict(rep)
