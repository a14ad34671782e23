"""Confusion matrices and macro-averaged classification scores."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import EmptyMatrix, LabelOutOfRange, LengthMismatch


class Scores(NamedTuple):
    accuracy: float
    precision_macro: float
    f1_macro: float


def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows indexed by true class and columns by prediction."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"{y_true.shape[0]} labels vs {y_pred.shape[0]} predictions")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (precision, recall, f1); zero denominators give 0."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_scores(cm: np.ndarray, average: str = "macro") -> Scores:
    """Accuracy plus precision and F1 averaged over classes.

    ``average="macro"`` weights every class equally, including classes
    absent from both truth and prediction. ``"weighted"`` weights by
    support instead.
    """
    cm = np.asarray(cm)
    n = cm.sum()
    if n <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    precision, _, f1 = per_class_scores(cm)
    if average == "macro":
        weights = np.full(len(cm), 1.0 / len(cm))
    elif average == "weighted":
        weights = cm.sum(axis=1) / n
    else:
        raise ValueError(f"unknown average {average!r}")
    return Scores(float(np.trace(cm) / n), float(precision @ weights), float(f1 @ weights))


def evaluate(y_true, y_pred, num_classes: int, average: str = "macro") -> Scores:
    return macro_scores(confusion(y_true, y_pred, num_classes), average)
