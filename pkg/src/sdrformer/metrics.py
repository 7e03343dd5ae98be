"""Classification metrics (ACC, macro F1, Cohen's kappa, AUC), ROC curves and
Welch's t-test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


def per_class_scores(cm: np.ndarray) -> list[dict]:
    out = []
    for k in range(cm.shape[0]):
        tp = cm[k, k]
        support = cm[k].sum()
        predicted = cm[:, k].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append({"precision": float(precision), "recall": float(recall), "f1": float(f1),
                    "support": int(support)})
    return out


def macro_f1(cm: np.ndarray) -> float:
    """Mean F1 over classes that occur in labels or predictions."""
    present = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    scores = np.array([s["f1"] for s in per_class_scores(cm)])
    return float(scores[present].mean())


def cohen_kappa(cm: np.ndarray) -> float:
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float((cm.sum(axis=0) * cm.sum(axis=1)).sum()) / (n * n)
    if pe == 1.0:
        return 0.0  # a single class in both labels and predictions: agreement is undefined
    return float((po - pe) / (1.0 - pe))


def roc_curve(binary_labels, scores, drop_intermediate: bool = True):
    """Return (thresholds, fpr, tpr), starting at (0, 0) with threshold +inf."""
    y = np.asarray(binary_labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.all() or not y.any():
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    thr = np.r_[np.inf, s[last_of_run]]
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    if drop_intermediate and len(fpr) > 2:
        keep = np.ones(len(fpr), dtype=bool)
        for i in range(1, len(fpr) - 1):
            if (fpr[i - 1] == fpr[i] == fpr[i + 1]) or (tpr[i - 1] == tpr[i] == tpr[i + 1]):
                keep[i] = False
        thr, fpr, tpr = thr[keep], fpr[keep], tpr[keep]
    return thr, fpr, tpr


def trapezoid_auc(fpr, tpr) -> float:
    return float(np.trapezoid(tpr, fpr))


def binary_auc(binary_labels, scores) -> float:
    """Probability a random positive outranks a random negative (ties count half)."""
    y = np.asarray(binary_labels, dtype=bool)
    ranks = stats.rankdata(np.asarray(scores, dtype=np.float64))
    n_pos, n_neg = y.sum(), (~y).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    acc: float
    f1: float
    kappa: float
    auc: float | None
    confusion: np.ndarray
    per_class: list[dict]
    roc: dict[int, dict] = field(default_factory=dict)
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    def summary(self) -> dict:
        return {"acc": self.acc, "auc": self.auc, "f1": self.f1, "kappa": self.kappa}

    def to_dict(self) -> dict:
        return {**self.summary(), "confusion": self.confusion.tolist(),
                "per_class": self.per_class, "notes": self.notes,
                "roc": {str(k): v for k, v in self.roc.items()}}


def compute_metrics(labels, scores, n_classes: int | None = None) -> MetricsReport:
    """labels: (n,) ints; scores: (n, K) class probabilities."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    k = n_classes or scores.shape[1]
    preds = scores.argmax(axis=1)
    cm = confusion_matrix(labels, preds, k)
    roc, aucs = {}, {}
    for c in range(k):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        thr, fpr, tpr = roc_curve(pos, scores[:, c])
        roc[c] = {"threshold": thr.tolist(), "fpr": fpr.tolist(), "tpr": tpr.tolist()}
        aucs[c] = binary_auc(pos, scores[:, c])
    notes = []
    if k == 2:
        auc = aucs.get(1)
    else:
        auc = float(np.mean(list(aucs.values()))) if aucs else None
    if auc is None:
        notes.append("AUC undefined: split contains a single class")
    return MetricsReport(acc=accuracy(cm), f1=macro_f1(cm), kappa=cohen_kappa(cm), auc=auc,
                         confusion=cm, per_class=per_class_scores(cm), roc=roc,
                         labels=labels, scores=scores, notes=notes)


def t_test_independent(sample_a, sample_b) -> tuple[float, float]:
    """Welch's unequal-variance two-sample t-test; returns (t, two-sided p)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two observations")
    if np.array_equal(np.sort(a), np.sort(b)):
        return 0.0, 1.0
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)
