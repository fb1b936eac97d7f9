"""Marker-classification metrics and the evaluation report.

Two readings of "average precision" are provided:

* ``avg_precision`` (default): unweighted mean over classes of the precision of
  argmax predictions, a classes never predicted contributing 0;
* ``avg_precision_pr``: one-vs-rest area under the precision-recall curve
  from predicted probabilities, averaged over classes present in the truth.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import GapScaler, MarkedSequence, make_batch
from .model import SSLMTPPNet, target_arrays


@dataclass
class ConfusionMatrix:
    """``counts[true, predicted]``."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        cm = cls.empty(num_classes)
        cm.update(y_true, y_pred)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, y_true, y_pred) -> None:
        y_true = np.asarray(y_true, dtype=np.int64).ravel()
        y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
        if y_true.shape != y_pred.shape:
            raise ValueError("true and predicted label arrays differ in length")
        M = self.num_classes
        self.counts += np.bincount(y_true * M + y_pred, minlength=M * M).reshape(M, M)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den > 0 else 0.0


def per_class_scores(cm: ConfusionMatrix) -> dict[str, list[float]]:
    """Per-class precision, recall and F1; an empty denominator gives 0."""
    c = cm.counts
    tp = np.diag(c).astype(float)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = [_ratio(tp[k], predicted[k]) for k in range(cm.num_classes)]
    recall = [_ratio(tp[k], actual[k]) for k in range(cm.num_classes)]
    f1 = [_ratio(2 * tp[k], predicted[k] + actual[k]) for k in range(cm.num_classes)]
    return {"precision": precision, "recall": recall, "f1": f1}


def macro_micro_f1(cm: ConfusionMatrix) -> tuple[float, float]:
    """Macro- and micro-averaged F1 as percentages."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    f1 = per_class_scores(cm)["f1"]
    macro = 100.0 * sum(f1) / cm.num_classes
    tp = int(np.trace(cm.counts))
    wrong = cm.total - tp  # every error is one false positive and one false negative
    micro = 100.0 * _ratio(2 * tp, 2 * tp + wrong + wrong)
    return macro, micro


def average_precision(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class precision of argmax predictions, as a percentage."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    precision = per_class_scores(cm)["precision"]
    return 100.0 * sum(precision) / cm.num_classes


def accuracy(cm: ConfusionMatrix) -> float:
    return 100.0 * _ratio(int(np.trace(cm.counts)), cm.total)


def ranked_average_precision(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Area under the precision-recall step curve for one binary problem (as a fraction)."""
    y_true = np.asarray(y_true, dtype=bool)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
    s = np.asarray(scores, dtype=float)[order]
    hits = y_true[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    # evaluate only at the last index of each tied score block
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


def pr_average_precision(y_true: np.ndarray, proba: np.ndarray) -> float:
    """Macro one-vs-rest ranked average precision over classes present in ``y_true`` (percentage)."""
    y_true = np.asarray(y_true)
    present = [k for k in range(proba.shape[1]) if np.any(y_true == k)]
    if not present:
        raise ValueError("no labels to score")
    return 100.0 * float(np.mean([ranked_average_precision(y_true == k, proba[:, k]) for k in present]))


@dataclass
class EvalReport:
    avg_precision: float
    macro_f1: float
    micro_f1: float
    avg_precision_pr: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    zero_division_classes: list[int]
    class_counts: list[int]
    confusion: list[list[int]]
    time_mae_scaled: float
    time_mae_raw: float
    n_events: int
    avg_precision_definition: str = "argmax-macro"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")


def report_from_predictions(y_true: np.ndarray, proba: np.ndarray, gap_pred_scaled: np.ndarray,
                            gap_true_scaled: np.ndarray, gap_true_raw: np.ndarray,
                            scaler: GapScaler) -> EvalReport:
    num_classes = proba.shape[1]
    if y_true.size == 0:
        raise ValueError("no events to evaluate")
    y_pred = proba.argmax(axis=1)
    cm = ConfusionMatrix.from_labels(y_true, y_pred, num_classes)
    scores = per_class_scores(cm)
    macro, micro = macro_micro_f1(cm)
    predicted = cm.counts.sum(axis=0)
    actual = cm.counts.sum(axis=1)
    zero_div = [k for k in range(num_classes) if predicted[k] == 0 or actual[k] == 0]
    return EvalReport(
        avg_precision=average_precision(cm),
        macro_f1=macro,
        micro_f1=micro,
        avg_precision_pr=pr_average_precision(y_true, proba),
        per_class_precision=scores["precision"],
        per_class_recall=scores["recall"],
        per_class_f1=scores["f1"],
        zero_division_classes=zero_div,
        class_counts=[int(x) for x in actual],
        confusion=cm.counts.tolist(),
        time_mae_scaled=float(np.mean(np.abs(gap_pred_scaled - gap_true_scaled))),
        time_mae_raw=float(np.mean(np.abs(scaler.inverse(gap_pred_scaled) - gap_true_raw))),
        n_events=int(y_true.size),
    )


def collect_predictions(model: SSLMTPPNet, sequences: Sequence[MarkedSequence], scaler: GapScaler,
                        batch_size: int = 256) -> dict[str, np.ndarray]:
    """Next-event predictions at every (event, next event) pair, in sequence order."""
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ("y_true", "proba", "gap_pred", "gap_true", "gap_raw")}
    for lo in range(0, len(sequences), batch_size):
        batch = make_batch(sequences[lo: lo + batch_size], scaler)
        proba, gap = model.predict_proba_batch(batch)
        next_markers, next_gaps, valid = target_arrays(batch)
        sel = valid > 0
        raw = np.zeros_like(batch.gaps)
        raw[:, :-1] = batch.gaps[:, 1:]
        parts["y_true"].append(next_markers[sel])
        parts["proba"].append(proba[sel])
        parts["gap_pred"].append(gap[sel])
        parts["gap_true"].append(next_gaps[sel])
        parts["gap_raw"].append(raw[sel])
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in parts.items()}


def evaluate(model: SSLMTPPNet, sequences: Sequence[MarkedSequence], scaler: GapScaler,
             batch_size: int = 256) -> EvalReport:
    """Score next-marker and next-gap predictions on labeled test sequences."""
    if not sequences:
        raise ValueError("evaluate: empty test set")
    if any(s.markers is None for s in sequences):
        raise ValueError("evaluate: test sequences must carry ground-truth markers")
    p = collect_predictions(model, sequences, scaler, batch_size)
    return report_from_predictions(p["y_true"], p["proba"], p["gap_pred"], p["gap_true"], p["gap_raw"], scaler)


def streaming_confusion(pairs: Iterable[tuple[np.ndarray, np.ndarray]], num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(num_classes)
    for y_true, y_pred in pairs:
        cm.update(y_true, y_pred)
    return cm
