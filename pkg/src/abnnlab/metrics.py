"""Predictive and OOD-detection metrics.

Conventions: in-distribution samples are the positive class and a higher
score means "more in-distribution". Metrics are fractions in [0, 1].
"""

from __future__ import annotations

import dataclasses
import io
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def _check_probs(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("probs must be a nonempty (n, classes) array")
    if labels.shape != (len(probs),):
        raise ValueError(f"labels shape {labels.shape} does not match {len(probs)} samples")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label out of range")
    return probs, labels


def accuracy(probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def nll(probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, 1e-300))))


def ece(probs, labels, n_bins: int = 15) -> float:
    """Top-label expected calibration error with equal-width bins.

    Bin ``b`` covers ``(b/n_bins, (b+1)/n_bins]``; a confidence of exactly 0
    falls in the first bin.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs, labels = _check_probs(probs, labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(bins, weights=correct, minlength=n_bins)
    n = len(conf)
    terms = [
        (counts[b] / n) * abs(acc_sum[b] / counts[b] - conf_sum[b] / counts[b])
        for b in range(n_bins)
        if counts[b] > 0
    ]
    return math.fsum(terms)


def ood_scores(mean_probs) -> np.ndarray:
    """Maximum softmax probability per sample."""
    return np.asarray(mean_probs, dtype=np.float64).max(axis=1)


def _check_scores(scores_id, scores_ood) -> tuple[np.ndarray, np.ndarray]:
    s_id = np.asarray(scores_id, dtype=np.float64).ravel()
    s_ood = np.asarray(scores_ood, dtype=np.float64).ravel()
    if s_id.size == 0 or s_ood.size == 0:
        raise ValueError("both score sets must be nonempty")
    return s_id, s_ood


def auroc(scores_id, scores_ood) -> float:
    """P(id > ood) + P(id == ood) / 2 via the Mann-Whitney rank sum."""
    s_id, s_ood = _check_scores(scores_id, scores_ood)
    n, m = s_id.size, s_ood.size
    ranks = rankdata(np.concatenate([s_id, s_ood]))
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def _threshold_counts(s_id: np.ndarray, s_ood: np.ndarray):
    """Distinct thresholds in descending order with the cumulative counts of
    ID and OOD scores >= each threshold."""
    scores = np.concatenate([s_id, s_ood])
    is_id = np.concatenate([np.ones(s_id.size, np.int64), np.zeros(s_ood.size, np.int64)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_id = scores[order], is_id[order]
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(is_id)[last]
    fp = np.cumsum(1 - is_id)[last]
    return scores[last], tp, fp


def aupr(scores_id, scores_ood) -> float:
    """Area under precision-recall (ID positive) by step integration:
    sum over thresholds of (recall increase) * precision."""
    s_id, s_ood = _check_scores(scores_id, scores_ood)
    _, tp, fp = _threshold_counts(s_id, s_ood)
    n = s_id.size
    prev_tp = np.r_[0, tp[:-1]]
    terms = [((t - p) / n) * (t / (t + f)) for t, p, f in zip(tp.tolist(), prev_tp.tolist(), fp.tolist()) if t > p]
    return math.fsum(terms)


def fpr_at_95_tpr(scores_id, scores_ood) -> float:
    """FPR at the largest threshold whose TPR reaches 0.95."""
    s_id, s_ood = _check_scores(scores_id, scores_ood)
    _, tp, fp = _threshold_counts(s_id, s_ood)
    # integer form of tp / n >= 0.95
    reached = np.nonzero(tp * 100 >= 95 * s_id.size)[0]
    return float(fp[reached[0]] / s_ood.size)


@dataclass
class MetricsReport:
    acc: float
    nll: float
    ece: float
    auroc: float
    aupr: float
    fpr95: float
    mi_id_mean: float
    mi_ood_mean: float
    n_id: int
    n_ood: int
    config: dict = field(default_factory=dict)

    METRIC_KEYS = ("acc", "nll", "ece", "auroc", "aupr", "fpr95", "mi_id_mean", "mi_ood_mean", "n_id", "n_ood")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(**d)

    @classmethod
    def csv_header(cls) -> list[str]:
        return list(cls.METRIC_KEYS)

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.METRIC_KEYS]

    def to_csv_line(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([repr(v) for v in self.csv_row()])
        return buf.getvalue()
