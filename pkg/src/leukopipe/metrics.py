"""Classification metrics computed from first principles.

Covers one-vs-rest confusion counts, accuracy, per-class and macro-averaged
precision/recall/F1, and ROC AUC. AUC uses the rank-sum (Mann-Whitney) form
with half credit for ties, which equals the trapezoidal area under the ROC
curve:

    AUC = (#{score_pos > score_neg} + 0.5 * #{score_pos = score_neg})
          / (n_pos * n_neg)

Zero-denominator precision/recall/F1 follow the usual convention: the value
is 0 and a warning is emitted.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import ClassLabel
from .errors import EmptyInput, IoFailure, SingleClassOnly

DECISION_THRESHOLD = 0.5  # predicted ALL iff P(ALL) >= 0.5 (tie goes to ALL)


@dataclass(frozen=True)
class PredictionSet:
    """Aligned ids, ground truth, P(ALL) scores, and thresholded labels."""

    ids: tuple[str, ...]
    labels: tuple[int, ...]
    scores: tuple[float, ...]
    predicted: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.ids)
        if n == 0:
            raise EmptyInput("prediction set is empty")
        if not (len(self.labels) == len(self.scores) == len(self.predicted) == n):
            raise EmptyInput("prediction set fields have mismatched lengths")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise EmptyInput("scores must lie in [0, 1]")
        if any(v not in (0, 1) for v in self.labels):
            raise EmptyInput("labels must be 0 or 1")

    @classmethod
    def from_scores(
        cls,
        ids: Sequence[str],
        labels: Sequence[int],
        scores: Sequence[float],
    ) -> "PredictionSet":
        predicted = tuple(
            int(ClassLabel.ALL) if s >= DECISION_THRESHOLD else int(ClassLabel.HEM)
            for s in scores
        )
        return cls(tuple(ids), tuple(int(v) for v in labels),
                   tuple(float(s) for s in scores), predicted)


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(preds: PredictionSet) -> dict[ClassLabel, ClassCounts]:
    """One-vs-rest confusion counts for each class."""
    out: dict[ClassLabel, ClassCounts] = {}
    for label in ClassLabel:
        tp = fp = fn = tn = 0
        for truth, pred in zip(preds.labels, preds.predicted):
            is_pos = truth == int(label)
            said_pos = pred == int(label)
            if is_pos and said_pos:
                tp += 1
            elif not is_pos and said_pos:
                fp += 1
            elif is_pos and not said_pos:
                fn += 1
            else:
                tn += 1
        out[label] = ClassCounts(tp=tp, fp=fp, fn=fn, tn=tn)
    return out


def _safe_ratio(num: int, denom: int, what: str) -> float:
    if denom == 0:
        warnings.warn(f"{what} undefined (0/0); using 0 by convention",
                      stacklevel=3)
        return 0.0
    return num / denom


@dataclass(frozen=True)
class MetricsReport:
    """Everything the evaluation emits for one model on one prediction set."""

    n: int
    counts: Mapping[ClassLabel, ClassCounts]
    accuracy: float
    precision_per_class: Mapping[ClassLabel, float]
    recall_per_class: Mapping[ClassLabel, float]
    f1_per_class: Mapping[ClassLabel, float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    auc: float | None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                label.name: {
                    "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                    "precision": self.precision_per_class[label],
                    "recall": self.recall_per_class[label],
                    "f1": self.f1_per_class[label],
                }
                for label, c in self.counts.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        counts = {}
        precision = {}
        recall = {}
        f1 = {}
        for name, block in d["per_class"].items():
            label = ClassLabel[name]
            counts[label] = ClassCounts(tp=block["tp"], fp=block["fp"],
                                        fn=block["fn"], tn=block["tn"])
            precision[label] = block["precision"]
            recall[label] = block["recall"]
            f1[label] = block["f1"]
        return cls(
            n=d["n"], counts=counts, accuracy=d["accuracy"],
            precision_per_class=precision, recall_per_class=recall,
            f1_per_class=f1, macro_precision=d["macro_precision"],
            macro_recall=d["macro_recall"], macro_f1=d["macro_f1"],
            auc=d["auc"],
        )


def macro_metrics(
    counts: Mapping[ClassLabel, ClassCounts],
) -> tuple[float, float, float, float,
           dict[ClassLabel, tuple[float, float, float]]]:
    """(accuracy, macro P, macro R, macro F1, per-class (P, R, F1))."""
    per_class: dict[ClassLabel, tuple[float, float, float]] = {}
    for label, c in counts.items():
        p = _safe_ratio(c.tp, c.tp + c.fp, f"precision[{label.name}]")
        r = _safe_ratio(c.tp, c.tp + c.fn, f"recall[{label.name}]")
        if p + r == 0.0:
            f1 = 0.0
        else:
            f1 = 2.0 * p * r / (p + r)
        per_class[label] = (p, r, f1)

    any_counts = next(iter(counts.values()))
    correct = sum(c.tp for c in counts.values())
    # each sample is TP for exactly one of the two one-vs-rest tables
    accuracy = correct / any_counts.n

    k = len(counts)
    macro_p = sum(v[0] for v in per_class.values()) / k
    macro_r = sum(v[1] for v in per_class.values()) / k
    macro_f1 = sum(v[2] for v in per_class.values()) / k
    return accuracy, macro_p, macro_r, macro_f1, per_class


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Probability that a random positive outscores a random negative.

    Computed from midranks in O(n log n); ties get half credit.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.size == 0:
        raise EmptyInput("no labels given")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly(
            f"AUC undefined with {n_pos} positives / {n_neg} negatives")

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(y.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1

    rank_sum_pos = float(np.sum(ranks[y == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_report(preds: PredictionSet) -> MetricsReport:
    """Full metric bundle; AUC is absent (None) when only one class occurs."""
    counts = confusion_counts(preds)
    accuracy, macro_p, macro_r, macro_f1, per_class = macro_metrics(counts)
    try:
        auc = roc_auc(preds.labels, preds.scores)
    except SingleClassOnly:
        warnings.warn("single-class prediction set: AUC not reported",
                      stacklevel=2)
        auc = None
    return MetricsReport(
        n=len(preds.ids),
        counts=counts,
        accuracy=accuracy,
        precision_per_class={k: v[0] for k, v in per_class.items()},
        recall_per_class={k: v[1] for k, v in per_class.items()},
        f1_per_class={k: v[2] for k, v in per_class.items()},
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f1,
        auc=auc,
    )


# --- file formats --------------------------------------------------------------

def save_predictions(preds: PredictionSet, path: Path | str) -> None:
    """CSV with one line per sample: id, true label, P(ALL)."""
    try:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", "p_all"])
            for rid, label, score in zip(preds.ids, preds.labels, preds.scores):
                writer.writerow([rid, label, repr(score)])
    except OSError as exc:
        raise IoFailure(f"cannot write predictions {path}: {exc}") from exc


def load_predictions(path: Path | str) -> PredictionSet:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            ids, labels, scores = [], [], []
            for row in reader:
                ids.append(row["id"])
                labels.append(int(row["label"]))
                scores.append(float(row["p_all"]))
    except OSError as exc:
        raise IoFailure(f"cannot read predictions {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise IoFailure(f"bad prediction file {path}: {exc}") from exc
    return PredictionSet.from_scores(ids, labels, scores)


def save_report(report: MetricsReport, path: Path | str) -> None:
    try:
        Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                              encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc


def load_report(path: Path | str) -> MetricsReport:
    try:
        return MetricsReport.from_dict(
            json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise IoFailure(f"bad report file {path}: {exc}") from exc
