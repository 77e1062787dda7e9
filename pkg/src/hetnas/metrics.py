from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def metric_macro_f1(pred, truth, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1.

    Every class in ``range(num_classes)`` counts, including classes that are neither
    present nor predicted (they score 0).
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("macro-F1 needs two nonempty arrays of equal length")
    if num_classes is None:
        num_classes = int(max(pred.max(), truth.max())) + 1
    scores = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def metric_auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("AUC labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
