"""Evaluation: ranking metrics and prediction-time averaging.

The AUC here is the Mann-Whitney statistic computed from average ranks,
ties worth half a pair, which is exactly the area under the step curve
traced by the operating points. Tests hold it to an O(n^2) pairwise
oracle with exact equality, so the implementation must not drift by even
an ulp's worth of sloppiness: sums are done in float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, DimensionError, UsageError
from .graph import NetworkGraph
from .kernels import flip, softmax

FLIP_PASSES = ((), ("horizontal",), ("vertical",), ("horizontal", "vertical"))


@dataclass
class RocResult:
    auc: float
    thresholds: np.ndarray  # descending; row 0 is +inf (nothing positive)
    tpr: np.ndarray
    fpr: np.ndarray

    def operating_points(self):
        return list(zip(self.thresholds, self.fpr, self.tpr))


def roc_auc(scores, labels) -> RocResult:
    """Area under the receiver operating curve, with the curve itself.

    scores: higher means more positive. labels: 0/1. At least one of each
    class is required; otherwise the statistic is undefined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}; want equal 1-d")
    if not np.isfinite(scores).all():
        raise UsageError("scores contain NaN/Inf")
    bad = set(np.unique(labels)) - {0, 1}
    if bad:
        raise UsageError(f"labels must be 0/1, got extra values {sorted(bad)}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateBatchError(
            f"need both classes for a ranking metric (pos={n_pos}, neg={n_neg})"
        )

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average rank over the tie block
        i = j
    rank_sum = float(ranks[labels == 1].sum())
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # Operating points at +inf then every distinct score, descending.
    distinct = np.unique(scores)[::-1]
    thresholds = np.concatenate([[np.inf], distinct])
    tpr = np.empty(thresholds.size)
    fpr = np.empty(thresholds.size)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    for t_i, t in enumerate(thresholds):
        tpr[t_i] = (pos_scores >= t).sum() / n_pos
        fpr[t_i] = (neg_scores >= t).sum() / n_neg
    return RocResult(auc=float(auc), thresholds=thresholds, tpr=tpr, fpr=fpr)


def accuracy(pred_labels, labels) -> float:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    if pred_labels.shape != labels.shape:
        raise DimensionError(f"{pred_labels.shape} vs {labels.shape}")
    if labels.size == 0:
        raise DegenerateBatchError("accuracy of zero samples")
    return float((pred_labels == labels).mean())


def confusion_matrix(pred_labels, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(labels), np.asarray(pred_labels)):
        cm[int(t), int(p)] += 1
    return cm


def predict_probs(net: NetworkGraph, x: np.ndarray, *, batch_size: int = 16) -> np.ndarray:
    """Chunked inference-mode class probabilities for a classifier net."""
    outs = []
    for i in range(0, x.shape[0], batch_size):
        logits = net.forward(np.ascontiguousarray(x[i:i + batch_size]), training=False)
        if logits.ndim != 2:
            raise UsageError(f"{net.name} is not a classifier (output shape {logits.shape})")
        outs.append(softmax(logits, axis=1))
    return np.concatenate(outs, axis=0)


def augmented_predict(net: NetworkGraph, x: np.ndarray, *, batch_size: int = 16):
    """Average the class probabilities over exactly four mirror passes:
    untouched, horizontal, vertical, both. Returns (mean, per_pass) where
    per_pass maps the pass name to its own probability array, so callers
    can audit that the mean is the mean of exactly these four."""
    per_pass = {}
    for axes in FLIP_PASSES:
        name = "+".join(axes) if axes else "identity"
        per_pass[name] = predict_probs(net, flip(x, axes), batch_size=batch_size)
    mean = sum(per_pass.values()) / len(per_pass)
    return mean, per_pass


def ensemble_average(prob_arrays) -> np.ndarray:
    """Unweighted mean of probability arrays from different models."""
    arrays = [np.asarray(p) for p in prob_arrays]
    if not arrays:
        raise UsageError("empty ensemble")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise DimensionError(f"ensemble members disagree on shape: "
                             f"{sorted({a.shape for a in arrays})}")
    return sum(arrays) / len(arrays)
