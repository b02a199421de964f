"""Binary classification metrics: ROC-AUC, PR curve, max-F1/accuracy,
break-even point, and disease-extinction precision.

All metrics are rank-based (invariant under strictly monotone score
transforms) and sweep every distinct score as a threshold, predicting
positive where score >= threshold.
"""

from __future__ import annotations

import json

import numpy as np


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    labels = labels.astype(np.int64)
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError("metrics undefined: labels contain a single class")
    return scores, labels


def auc(scores, labels):
    """ROC-AUC via the Mann-Whitney rank statistic with tie-averaged ranks."""
    scores, labels = _validate(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks over tied scores
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_curve(scores, labels):
    """(threshold, precision, recall) per distinct score, descending.

    Each row reports the operating point "predict positive iff
    score >= threshold"; recall is non-decreasing down the list and
    reaches 1 at the lowest threshold.
    """
    scores, labels = _validate(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order])
    n_pred = np.arange(1, scores.size + 1)
    # keep the last index of each tied block: that is the full >= threshold set
    last = np.flatnonzero(np.diff(sorted_scores) != 0)
    keep = np.append(last, scores.size - 1)
    n_pos = int(labels.sum())
    precision = tp[keep] / n_pred[keep]
    recall = tp[keep] / n_pos
    return sorted_scores[keep], precision, recall


def max_f1_acc(scores, labels):
    """Maximum F1 and maximum accuracy over all thresholds."""
    scores, labels = _validate(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order]).astype(np.float64)
    n_pred = np.arange(1, scores.size + 1, dtype=np.float64)
    last = np.flatnonzero(np.diff(sorted_scores) != 0)
    keep = np.append(last, scores.size - 1)
    tp, n_pred = tp[keep], n_pred[keep]
    n = labels.size
    n_pos = int(labels.sum())
    denom = n_pred + n_pos  # 2*tp/(n_pred+n_pos) == harmonic mean of p and r
    f1 = 2.0 * tp / denom
    tn = n - n_pos - (n_pred - tp)
    acc = (tp + tn) / n
    # the empty prediction set (threshold above max score) scores f1=0
    acc_empty = (n - n_pos) / n
    return float(f1.max()), float(max(acc.max(), acc_empty))


def bep(scores, labels):
    """Break-even point: precision where precision equals recall.

    Walks the PR list toward increasing recall; if equality falls between
    adjacent points, interpolates linearly. Ties resolve toward higher
    recall.
    """
    scores, labels = _validate(scores, labels)
    _, precision, recall = pr_curve(scores, labels)
    diff = precision - recall
    best = None
    for i in range(diff.size):
        if diff[i] == 0.0:
            best = float(precision[i])  # exact crossing; keep scanning for higher recall
        elif i + 1 < diff.size and diff[i] > 0.0 >= diff[i + 1]:
            # crossing between points i and i+1
            w = diff[i] / (diff[i] - diff[i + 1])
            best = float(precision[i] + w * (precision[i + 1] - precision[i]))
    if best is None:
        # no crossing: closest approach, ties toward higher recall
        idx = diff.size - 1 - int(np.argmin(np.abs(diff)[::-1]))
        best = float(precision[idx])
    return best


def extinction_recall(r0):
    """Minimum recall 1 - 1/R0 needed to drive the epidemic extinct."""
    if r0 <= 1.0:
        raise ValueError("extinction recall requires r0 > 1")
    return 1.0 - 1.0 / r0


def dep(scores, labels, r0):
    """Max precision among thresholds achieving recall >= 1 - 1/R0."""
    r_m = extinction_recall(r0)
    scores, labels = _validate(scores, labels)
    _, precision, recall = pr_curve(scores, labels)
    ok = recall >= r_m
    return float(precision[ok].max())


def metrics_report(scores, labels, r0):
    """All metrics as a plain dict, ready for JSON emission."""
    f1, accuracy = max_f1_acc(scores, labels)
    return {
        "auc": float(auc(scores, labels)),
        "f1": f1,
        "accuracy": accuracy,
        "bep": bep(scores, labels),
        "dep": dep(scores, labels, r0),
        "r_m": extinction_recall(r0),
    }


def write_metrics_json(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pr_csv(path, scores, labels):
    thresholds, precision, recall = pr_curve(scores, labels)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in zip(thresholds, precision, recall):
            fh.write(f"{float(t)!r},{float(p)!r},{float(r)!r}\n")
