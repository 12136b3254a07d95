"""Binary confusion-matrix metrics, positive class = pneumonia (label 1)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NO_PREDICTED_POSITIVES = "no_predicted_positives"
NO_ACTUAL_POSITIVES = "no_actual_positives"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self):
        """The same counts with the positive-class convention flipped."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate_flags: frozenset = field(default_factory=frozenset)

    def to_json(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "flags": sorted(self.degenerate_flags),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["accuracy"], obj["precision"], obj["recall"], obj["f1"],
                   frozenset(obj.get("flags", ())))


def confusion(predictions, labels):
    pred = np.asarray(predictions).reshape(-1)
    true = np.asarray(labels).reshape(-1)
    if pred.size != true.size:
        raise ValueError(f"{pred.size} predictions but {true.size} labels")
    if pred.size == 0:
        raise ValueError("confusion matrix needs at least one example")
    for name, arr in (("predictions", pred), ("labels", true)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} must be 0/1")
    pred = pred.astype(bool)
    true = true.astype(bool)
    return ConfusionMatrix(
        tp=int(np.sum(pred & true)),
        tn=int(np.sum(~pred & ~true)),
        fp=int(np.sum(pred & ~true)),
        fn=int(np.sum(~pred & true)),
    )


def report(cm):
    if min(cm.tp, cm.tn, cm.fp, cm.fn) < 0:
        raise ValueError("negative count in confusion matrix")
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    flags = set()
    accuracy = (cm.tp + cm.tn) / cm.total
    if cm.tp + cm.fp == 0:
        precision = 0.0
        flags.add(NO_PREDICTED_POSITIVES)
    else:
        precision = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        recall = 0.0
        flags.add(NO_ACTUAL_POSITIVES)
    else:
        recall = cm.tp / (cm.tp + cm.fn)
    pr = precision + recall
    f1 = 2 * precision * recall / pr if pr > 0 else 0.0
    return MetricsReport(accuracy, precision, recall, f1, frozenset(flags))
