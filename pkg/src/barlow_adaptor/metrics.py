"""Classification metrics: confusion counts, micro and macro accuracy."""

from __future__ import annotations

import numpy as np

from .model import ModelParams, predict_logits


def predict(params: ModelParams, x, batch_size: int | None = None) -> np.ndarray:
    """Arg-max class per row with frozen batch-norm statistics; ties go to the lowest index."""
    x = np.asarray(x, dtype=params.dtype)
    if batch_size is None:
        return np.argmax(predict_logits(params, x), axis=1)
    parts = [np.argmax(predict_logits(params, x[i:i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts)


def _check(truth, pred):
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ValueError(f"truth {truth.shape} and pred {pred.shape} must be equal-length vectors")
    if truth.size == 0:
        raise ValueError("accuracy is undefined on an empty set")
    return truth, pred


def confusion_counts(truth, pred, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` = number of rows with true class ``t`` predicted as ``p``."""
    truth, pred = _check(truth, pred)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def micro_accuracy(truth, pred) -> float:
    truth, pred = _check(truth, pred)
    return float(np.mean(truth == pred))


def macro_accuracy(truth, pred, num_classes: int | None = None) -> float:
    """Mean per-class recall over the classes present in ``truth``.

    Classes with no true rows are left out of the mean instead of counting as 0.
    """
    truth, pred = _check(truth, pred)
    if num_classes is None:
        num_classes = int(max(truth.max(), pred.max())) + 1
    cm = confusion_counts(truth, pred, num_classes)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))
