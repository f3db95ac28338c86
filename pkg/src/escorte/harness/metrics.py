from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..action import N_CLASSES

log = logging.getLogger(__name__)


class UndefinedClass(ValueError):
    """AP requested for a class with no positive examples."""


def average_precision(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Ranked AP: mean precision at each positive, highest score first.

    Equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(positives, dtype=bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedClass("no positives")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def mean_ap(per_class_ap: Sequence[float]) -> float:
    if len(per_class_ap) == 0:
        raise ValueError("mean_ap of an empty list")
    return float(np.mean(per_class_ap))


def per_class_ap(probs: np.ndarray, truths: Sequence[int]) -> dict[int, float]:
    """AP for every class that has at least one positive frame."""
    probs = np.asarray(probs)
    truths = np.asarray(truths)
    out = {}
    for c in range(probs.shape[1]):
        try:
            out[c] = average_precision(probs[:, c], truths == c)
        except UndefinedClass:
            log.warning("class %d has no positives; excluded from mAP", c)
    return out


def confusion_matrix(predictions: Sequence[int], truths: Sequence[int], k: int = N_CLASSES) -> np.ndarray:
    """Counts with truth on rows and prediction on columns."""
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions vs {len(truths)} truths")
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (np.asarray(truths, int), np.asarray(predictions, int)), 1)
    return cm
