"""Recall/precision bins used in place of LVIS AP_r / AP_c / AP_f."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .categories import Bin, CategoryTable
from .losses import BACKGROUND, sigmoid


def predict(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Category with the highest sigmoid score, or BACKGROUND if every score is below ``threshold``.

    ``np.argmax`` returns the first maximum, so ties go to the lower index.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    scores = np.asarray(scores)
    best = scores.argmax(axis=1)
    top = scores[np.arange(len(scores)), best]
    return np.where(top >= threshold, best, BACKGROUND)


def predict_softmax(logits: np.ndarray) -> np.ndarray:
    """Argmax over C+1 softmax logits; the trailing column is background."""
    c = logits.shape[1] - 1
    best = logits.argmax(axis=1)
    return np.where(best == c, BACKGROUND, best)


def scores_of(logits: np.ndarray, softmax: bool) -> np.ndarray:
    """Per-category foreground scores in [0, 1]."""
    if softmax:
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True))[:, :-1]
    return sigmoid(logits)


@dataclass
class EvalReport:
    recall: np.ndarray  # thresholded fg/bg + category decision
    precision: np.ndarray
    cls_recall: np.ndarray  # argmax over categories on true-foreground rows
    support: np.ndarray
    bins: np.ndarray
    bg_as_fg: float
    fg_as_bg: float

    def _bin_mean(self, values, b: Bin) -> float:
        mask = (self.bins == b) & (self.support > 0)
        return float(values[mask].mean()) if mask.any() else float("nan")

    def bin_means(self, which: str = "cls_recall") -> dict[str, float]:
        values = getattr(self, which)
        return {b.label: self._bin_mean(values, b) for b in Bin}

    def tail_metric(self, which: str = "cls_recall") -> float:
        m = self.bin_means(which)
        return float(np.nanmean([m["rare"], m["common"]]))

    def head_metric(self, which: str = "cls_recall") -> float:
        return self.bin_means(which)["frequent"]

    def macro(self, which: str = "cls_recall") -> float:
        values = getattr(self, which)
        return float(values[self.support > 0].mean())

    @property
    def missing(self) -> np.ndarray:
        """Categories absent from the eval set (excluded from bin means)."""
        return np.flatnonzero(self.support == 0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "bin", "support", "recall", "precision", "cls_recall"])
            for j in range(len(self.recall)):
                w.writerow([j, Bin(self.bins[j]).label, int(self.support[j]),
                            repr(float(self.recall[j])), repr(float(self.precision[j])),
                            repr(float(self.cls_recall[j]))])
            rec, cls = self.bin_means("recall"), self.bin_means("cls_recall")
            for b in Bin:
                w.writerow([f"mean_{b.label}", b.label, "", repr(rec[b.label]), "", repr(cls[b.label])])
            w.writerow(["macro", "", "", repr(self.macro("recall")), "", repr(self.macro("cls_recall"))])
            w.writerow(["bg_as_fg_rate", "", "", repr(self.bg_as_fg), "", ""])
            w.writerow(["fg_as_bg_rate", "", "", repr(self.fg_as_bg), "", ""])


def evaluate_predictions(pred, cls_pred, labels, table: CategoryTable) -> EvalReport:
    """Build a report from thresholded predictions and foreground-only argmax predictions."""
    c = table.num_categories
    labels = np.asarray(labels)
    pred = np.asarray(pred)
    fg = labels >= 0
    support = np.bincount(labels[fg], minlength=c)
    hits = np.bincount(labels[fg & (pred == labels)], minlength=c)
    cls_hits = np.bincount(labels[fg & (np.asarray(cls_pred) == labels)], minlength=c)
    predicted = np.bincount(pred[pred >= 0], minlength=c)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, hits / np.maximum(support, 1), 0.0)
        cls_recall = np.where(support > 0, cls_hits / np.maximum(support, 1), 0.0)
        precision = np.where(predicted > 0, hits / np.maximum(predicted, 1), 0.0)
    n_bg = int((~fg).sum())
    n_fg = int(fg.sum())
    bg_as_fg = float(((pred >= 0) & ~fg).sum() / n_bg) if n_bg else 0.0
    fg_as_bg = float(((pred < 0) & fg).sum() / n_fg) if n_fg else 0.0
    return EvalReport(recall, precision, cls_recall, support, np.asarray(table.bins), bg_as_fg, fg_as_bg)


def evaluate(params, features, labels, table: CategoryTable, threshold: float = 0.5, softmax: bool = False) -> EvalReport:
    from .model import forward

    logits = forward(params, features)
    if softmax:
        pred = predict_softmax(logits)
        fg_logits = logits[:, :-1]
    else:
        pred = predict(sigmoid(logits), threshold)
        fg_logits = logits
    return evaluate_predictions(pred, fg_logits.argmax(axis=1), labels, table)
