"""Pixel accuracy over labeled pixels."""
import numpy as np

from .autodiff import SENTINEL
from .errors import NoLabeledPixelsError, ShapeError


def overall_accuracy(pred_labels, true_labels, sentinel: int = SENTINEL) -> float:
    """Fraction of correctly predicted pixels, ignoring pixels labeled ``sentinel``."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} and label {true.shape} shapes differ")
    valid = true != sentinel
    n = int(valid.sum())
    if n == 0:
        raise NoLabeledPixelsError()
    return float((pred[valid] == true[valid]).sum()) / n


def macro_accuracy(pred_labels, true_labels, n_classes: int, sentinel: int = SENTINEL) -> float:
    """Mean per-class recall over classes that occur among labeled pixels."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    valid = true != sentinel
    if not valid.any():
        raise NoLabeledPixelsError()
    t, p = true[valid].astype(np.int64), pred[valid].astype(np.int64)
    support = np.bincount(t, minlength=n_classes)
    hits = np.bincount(t[p == t], minlength=n_classes)
    present = support > 0
    return float((hits[present] / support[present]).mean())
