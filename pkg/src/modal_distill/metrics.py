"""Per-class average precision and the class-column report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data import CLASS_NAMES, batch_iter
from .models import predict


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mean of precision@k over the ranks k of positive items.

    Items are ranked by descending score, ties broken by original index.
    Returns ``None`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if scores.size == 0:
        raise ContractError("average_precision needs at least one item")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    # left-to-right accumulation (not pairwise) so the result is reproducible term by term
    return float(np.cumsum(precision_at_hits)[-1] / n_pos)


@dataclass
class ClassResult:
    code: str
    ap: float | None  # percent
    n_positives: int
    accuracy: float  # percent of correct thresholded predictions


@dataclass
class MetricsReport:
    per_class: list[ClassResult]
    n_examples: int
    label: str = ""
    overall_accuracy: float = 0.0
    overall: float | None = field(init=False)

    def __post_init__(self):
        defined = [c.ap for c in self.per_class if c.ap is not None]
        self.overall = float(np.mean(defined)) if defined else None

    @property
    def undefined_classes(self) -> list[str]:
        return [c.code for c in self.per_class if c.ap is None]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_examples": self.n_examples,
            "overall": self.overall,
            "overall_accuracy": self.overall_accuracy,
            "undefined_classes": self.undefined_classes,
            "per_class": [
                {"code": c.code, "ap": c.ap, "n_positives": c.n_positives, "accuracy": c.accuracy}
                for c in self.per_class
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = [ClassResult(c["code"], c["ap"], c["n_positives"], c["accuracy"]) for c in d["per_class"]]
        return cls(per, d["n_examples"], d.get("label", ""), d.get("overall_accuracy", 0.0))

    def to_text(self) -> str:
        """Fixed-width table. The header line holds only the column names."""
        width = 8
        cols = ["Overall", *CLASS_NAMES]

        def fmt(v):
            return "n/a" if v is None else f"{v:.2f}"

        ap_row = [fmt(self.overall)] + [fmt(c.ap) for c in self.per_class]
        acc_row = [fmt(self.overall_accuracy)] + [fmt(c.accuracy) for c in self.per_class]
        title = f"{self.label or 'model'}  (n={self.n_examples})"
        lines = [
            title,
            " ".join(c.rjust(width) for c in cols).rstrip(),
            " ".join(v.rjust(width) for v in ap_row) + "  AP",
            " ".join(v.rjust(width) for v in acc_row) + "  Acc@0.5",
        ]
        return "\n".join(lines) + "\n"


def report_from_scores(scores: np.ndarray, labels: np.ndarray, label: str = "") -> MetricsReport:
    """Build a report from [n x 10] logits (or any monotone transform) and labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != len(CLASS_NAMES):
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}; expected [n x {len(CLASS_NAMES)}]")
    n = scores.shape[0]
    preds = predict(scores) if n else np.zeros_like(labels)
    per = []
    for k, code in enumerate(CLASS_NAMES):
        ap = average_precision(scores[:, k], labels[:, k]) if n else None
        acc = float((preds[:, k] == labels[:, k]).mean() * 100) if n else 0.0
        per.append(ClassResult(code, None if ap is None else ap * 100.0, int(labels[:, k].sum()), acc))
    overall_acc = float((preds == labels).mean() * 100) if n else 0.0
    return MetricsReport(per, n, label, overall_acc)


def collect_logits(model, dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Forward the split in file order without building a graph."""
    logits, labels = [], []
    with ad.no_grad():
        for batch in batch_iter(dataset, batch_size):
            logits.append(model(batch).z_p.data)
            labels.append(batch.labels)
    if not logits:
        return np.zeros((0, len(CLASS_NAMES))), np.zeros((0, len(CLASS_NAMES)))
    return np.concatenate(logits), np.concatenate(labels)


def evaluate(model, dataset, batch_size: int = 256, label: str = "") -> MetricsReport:
    logits, labels = collect_logits(model, dataset, batch_size)
    return report_from_scores(logits, labels, label)

