"""Independent reference implementations used to cross-check the library.

Everything here is deliberately written the slow, obvious way (direct
enumeration, exhaustive pairs, trapezoidal integration, finite differences)
and shares no code with the package.
"""

from __future__ import annotations

import numpy as np


def brute_confusion(labels, predicted, positive):
    """(tp, fp, fn, tn) for one class by walking every item."""
    tp = fp = fn = tn = 0
    for y, p in zip(labels, predicted):
        if y == positive and p == positive:
            tp += 1
        elif y != positive and p == positive:
            fp += 1
        elif y == positive and p != positive:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_metrics(labels, predicted):
    """accuracy, {cls: (precision, recall, f1)}, (macro p, r, f1)."""
    per = {}
    for cls in (0, 1):
        tp, fp, fn, _ = brute_confusion(labels, predicted, cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per[cls] = (precision, recall, f1)
    accuracy = sum(1 for y, p in zip(labels, predicted) if y == p) / len(labels)
    macro = tuple(sum(per[c][i] for c in per) / 2 for i in range(3))
    return accuracy, per, macro


def pairwise_auc(labels, scores):
    """Exhaustive positive/negative pair counting with half credit for ties."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def trapezoid_auc(labels, scores):
    """Area under the ROC curve by trapezoidal integration over thresholds."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    pos = y == 1
    neg = ~pos
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    tpr = [0.0]
    fpr = [0.0]
    for t in np.unique(s)[::-1]:
        hits = s >= t
        tpr.append(float(np.sum(hits & pos)) / n_pos)
        fpr.append(float(np.sum(hits & neg)) / n_neg)
    return float(np.trapezoid(tpr, fpr))


def central_difference_grad(f, x, h=1e-6):
    """Per-element central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = x.copy()
        minus = x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
        it.iternext()
    return grad
