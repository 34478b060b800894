"""Threshold sweeps: ROC, precision-recall and MCC-F1 curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import _io
from .errors import UndefinedMetricError


@dataclass
class CurveReport:
    """Curve points at strictly decreasing score thresholds.

    A sample is called positive when its score is >= the threshold.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int
    auroc: float = float("nan")
    auprc: float = float("nan")
    mcc_f1: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def fn(self):
        return self.n_pos - self.tp

    @property
    def tn(self):
        return self.n_neg - self.fp

    @property
    def tpr(self):
        return self.tp / self.n_pos

    @property
    def fpr(self):
        return self.fp / self.n_neg

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self):
        return self.tpr

    @property
    def f1(self):
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn)

    @property
    def mcc(self):
        """MCC per threshold; NaN where a confusion-matrix margin is empty."""
        tp, fp, fn, tn = (np.asarray(v, dtype=np.float64) for v in (self.tp, self.fp, self.fn, self.tn))
        denom = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, (tp * tn - fp * fn) / denom, np.nan)

    @property
    def mcc_f1_points(self) -> np.ndarray:
        """(F1, unit-normalized MCC) pairs, skipping thresholds with undefined MCC."""
        mcc = self.mcc
        ok = np.isfinite(mcc)
        return np.column_stack([self.f1[ok], (mcc[ok] + 1.0) / 2.0])

    @property
    def roc_points(self) -> np.ndarray:
        return np.column_stack([np.r_[0.0, self.fpr], np.r_[0.0, self.tpr]])

    @property
    def pr_points(self) -> np.ndarray:
        return np.column_stack([self.recall, self.precision])

    def summary(self) -> dict:
        return {"auroc": self.auroc, "auprc": self.auprc, "mcc_f1": self.mcc_f1}


def _sweep(scores, labels) -> CurveReport:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise UndefinedMetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("both classes must be present")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(l)[last]
    fp = np.cumsum(~l)[last]
    return CurveReport(s[last], tp, fp, n_pos, n_neg)


def auroc_rank(scores, labels) -> float:
    """Mann-Whitney formulation with mid-ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n1, n0 = int(labels.sum()), int((~labels).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("both classes must be present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def average_precision(rep: CurveReport) -> float:
    # weight by positive counts, not recall steps, so a perfect ranking sums to exactly 1
    gained = np.diff(np.r_[0, rep.tp])
    return float(np.sum(gained * rep.precision) / rep.n_pos)


def roc_pr_curves(scores, labels) -> CurveReport:
    rep = _sweep(scores, labels)
    rep.auroc = auroc_rank(scores, labels)
    rep.auprc = average_precision(rep)
    return rep


def mcc_f1_summary(points: np.ndarray) -> float:
    """1 - mean distance of the curve to (1, 1), scaled by sqrt(2)."""
    if len(points) == 0:
        return float("nan")
    d = np.hypot(1.0 - points[:, 0], 1.0 - points[:, 1])
    return float(1.0 - d.mean() / math.sqrt(2.0))


def mcc_f1_curve(scores, labels) -> CurveReport:
    rep = _sweep(scores, labels)
    rep.mcc_f1 = mcc_f1_summary(rep.mcc_f1_points)
    return rep


def evaluate_scores(scores, labels) -> CurveReport:
    """ROC, PR and MCC-F1 in one report."""
    rep = roc_pr_curves(scores, labels)
    rep.mcc_f1 = mcc_f1_summary(rep.mcc_f1_points)
    return rep


def write_curve_csv(path, rep: CurveReport) -> None:
    with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "tp", "fp", "fpr", "tpr", "precision", "recall", "f1", "mcc", "mcc_unit"])
        mcc = rep.mcc
        for i in range(len(rep.thresholds)):
            m = mcc[i]
            w.writerow([
                repr(float(rep.thresholds[i])), int(rep.tp[i]), int(rep.fp[i]),
                repr(float(rep.fpr[i])), repr(float(rep.tpr[i])), repr(float(rep.precision[i])),
                repr(float(rep.recall[i])), repr(float(rep.f1[i])),
                "" if not np.isfinite(m) else repr(float(m)),
                "" if not np.isfinite(m) else repr(float((m + 1) / 2)),
            ])
