"""Accuracy, macro-F1 and WER-bucketed accuracy reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .forge.corpus import WER_BUCKETS, bucket_of


def evaluate_metrics(predictions: Sequence[int], gold: Sequence[int], num_classes: int) -> tuple[float, float]:
    """(accuracy, macro-F1); classes with no support on either side score F1 = 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    ref = np.asarray(gold, dtype=np.int64)
    if pred.shape != ref.shape:
        raise ValueError(f"{len(pred)} predictions for {len(ref)} gold labels")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    for name, arr in (("prediction", pred), ("gold", ref)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label outside [0, {num_classes})")
    if ref.size == 0:
        raise ValueError("cannot score an empty set")
    accuracy = float((pred == ref).mean())
    f1 = np.zeros(num_classes)
    for c in range(num_classes):
        tp = np.sum((pred == c) & (ref == c))
        denom = np.sum(pred == c) + np.sum(ref == c)
        f1[c] = 2.0 * tp / denom if denom else 0.0
    return accuracy, float(f1.mean())


def format_pair(accuracy: float, macro_f1: float) -> str:
    """Percentages in the usual ``Accuracy / Macro-F1`` table style."""
    return f"{100 * accuracy:.2f} / {100 * macro_f1:.2f}"


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    buckets: dict[str, dict]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "overall": {"accuracy": self.accuracy, "macro_f1": self.macro_f1},
            "buckets": {k: dict(v) for k, v in self.buckets.items()},
            "meta": dict(self.meta),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        overall = obj["overall"]
        return cls(overall["accuracy"], overall["macro_f1"], {k: dict(v) for k, v in obj["buckets"].items()}, dict(obj["meta"]))

    def render(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "EvalReport":
        return cls.from_json(json.loads(text))

    def bucket_accuracy(self, name: str) -> float | None:
        return self.buckets[name]["accuracy"]

    def table(self) -> str:
        rows = [f"{'WER range':<10} {'count':>6} {'accuracy':>9}"]
        for name, b in self.buckets.items():
            acc = "-" if b["accuracy"] is None else f"{100 * b['accuracy']:.2f}"
            rows.append(f"{name:<10} {b['count']:>6} {acc:>9}")
        rows.append(f"{'overall':<10} {sum(b['count'] for b in self.buckets.values()):>6} {format_pair(self.accuracy, self.macro_f1):>9}")
        return "\n".join(rows)


def wer_bucket_report(
    wers: Sequence[float | None],
    predictions: Sequence[int],
    gold: Sequence[int],
    num_classes: int,
    meta: dict | None = None,
) -> EvalReport:
    """Overall metrics plus per-bucket accuracy, bucketing by stored WER.

    Empty buckets report ``accuracy = None`` and ``count = 0``.
    """
    if not len(wers) == len(predictions) == len(gold):
        raise ValueError("wers, predictions and gold must have equal length")
    for i, w in enumerate(wers):
        if w is None:
            raise ValueError(f"record {i} has no stored wer")
    accuracy, macro_f1 = evaluate_metrics(predictions, gold, num_classes)
    hits: dict[str, list[bool]] = {name: [] for name, _, _ in WER_BUCKETS}
    for w, p, g in zip(wers, predictions, gold):
        hits[bucket_of(w)].append(int(p) == int(g))
    buckets = {
        name: {"accuracy": float(np.mean(h)) if h else None, "count": len(h)} for name, h in hits.items()
    }
    return EvalReport(accuracy, macro_f1, buckets, dict(meta or {}))
