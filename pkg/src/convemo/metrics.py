"""Frame-level scoring and corpus analyses (trigram heterogeneity, emotional inertia)."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import CLASS_NAMES, NUM_CLASSES, Conversation, Emotion

INERTIA_THRESHOLD = 0.75


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def normalized(self) -> np.ndarray:
        """Rows divided by their totals; rows of absent classes stay zero."""
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)


@dataclass
class MetricsReport:
    per_class_f1: list[float]
    micro_f1: float
    weighted_f1: float
    confusion: ConfusionMatrix
    frames_evaluated: int
    ignored_frames: int = 0

    def to_dict(self) -> dict:
        return {
            "classes": list(CLASS_NAMES),
            "per_class_f1": dict(zip(CLASS_NAMES, self.per_class_f1)),
            "micro_f1": self.micro_f1,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion.counts.tolist(),
            "confusion_normalized": self.confusion.normalized().tolist(),
            "frames_evaluated": self.frames_evaluated,
            "ignored_frames": self.ignored_frames,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _check(refs, hyps) -> tuple[np.ndarray, np.ndarray]:
    refs = np.asarray(refs, dtype=np.int64).reshape(-1)
    hyps = np.asarray(hyps, dtype=np.int64).reshape(-1)
    if refs.shape != hyps.shape:
        raise ValueError(f"refs and hyps differ in length: {refs.size} vs {hyps.size}")
    return refs, hyps


def confusion(refs, hyps, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    """Counts with reference classes on rows and hypotheses on columns."""
    refs, hyps = _check(refs, hyps)
    counts = np.bincount(refs * num_classes + hyps, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def f1_scores(refs, hyps, num_classes: int = NUM_CLASSES, ignored_frames: int = 0) -> MetricsReport:
    """Per-class, micro (frame accuracy) and support-weighted f1 over pre-filtered frames."""
    return report_from_confusion(confusion(refs, hyps, num_classes), ignored_frames)


def report_from_confusion(cm: ConfusionMatrix, ignored_frames: int = 0) -> MetricsReport:
    c = cm.counts
    num_classes = c.shape[0]
    tp = np.diag(c).astype(float)
    support = c.sum(axis=1).astype(float)
    predicted = c.sum(axis=0).astype(float)
    denom = support + predicted
    per_class = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    n = int(c.sum())
    micro = float(tp.sum() / n) if n else 0.0
    # exact rational sum, so the result is the correctly rounded weighted mean
    weighted = float(sum(Fraction(2 * int(t), int(d)) * int(s) for t, d, s in zip(tp, denom, support) if d)
                     / n) if n else 0.0
    return MetricsReport([float(x) for x in per_class], micro, weighted, cm, n, ignored_frames)


# ---------------------------------------------------------------------------
# corpus analyses


def segment_emotions(conv: Conversation) -> list[int]:
    return [int(s.label) for s in conv.segments if s.label != Emotion.IGNORE]


def trigram_probs(conversations: Iterable[Conversation], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Row-normalized (central, neighbor) table over trigrams whose two neighbors agree."""
    counts = np.zeros((num_classes, num_classes))
    for conv in conversations:
        seq = segment_emotions(conv)
        for left, mid, right in zip(seq, seq[1:], seq[2:]):
            if left == right:
                counts[mid, left] += 1
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def heterogeneous_fraction(table: np.ndarray) -> np.ndarray:
    """1 - diagonal for rows that have any trigram; NaN otherwise."""
    defined = table.sum(axis=1) > 0
    return np.where(defined, 1.0 - np.diag(table), np.nan)


@dataclass
class InertiaRow:
    conversation: str
    dominant: str
    fraction: float
    flagged: bool
    proportions: list[float]


@dataclass
class InertiaReport:
    rows: list[InertiaRow]
    threshold: float = INERTIA_THRESHOLD

    @property
    def flagged_fraction(self) -> float:
        return sum(r.flagged for r in self.rows) / len(self.rows) if self.rows else 0.0


def emotion_proportions(conv: Conversation, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Share of labeled duration per class.

    Durations are accumulated in integer microseconds so that equal totals
    tie exactly; argmax then resolves ties to the lowest class index.
    """
    dur = np.zeros(num_classes, dtype=np.int64)
    for s in conv.segments:
        if s.label != Emotion.IGNORE:
            dur[int(s.label)] += round(s.end_s * 1e6) - round(s.start_s * 1e6)
    total = dur.sum()
    return dur / total if total > 0 else dur.astype(float)


def inertia_report(conversations: Iterable[Conversation], threshold: float = INERTIA_THRESHOLD) -> InertiaReport:
    """Duration share of each conversation's dominant emotion; flagged above ``threshold``."""
    rows = []
    for conv in conversations:
        p = emotion_proportions(conv)
        k = int(np.argmax(p))
        rows.append(InertiaRow(conv.id, CLASS_NAMES[k], float(p[k]), bool(p[k] > threshold), p.tolist()))
    return InertiaReport(rows, threshold)


# ---------------------------------------------------------------------------
# CSV emitters


def write_matrix_csv(path, matrix: np.ndarray, row_label: str = "reference") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([row_label] + list(CLASS_NAMES))
        for name, row in zip(CLASS_NAMES, np.asarray(matrix)):
            w.writerow([name] + [repr(float(x)) if isinstance(x, (float, np.floating)) else int(x) for x in row])


def write_inertia_csv(path, report: InertiaReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["conversation", "dominant", "fraction", "flagged"] + list(CLASS_NAMES))
        for r in report.rows:
            w.writerow([r.conversation, r.dominant, f"{r.fraction:.6f}", int(r.flagged)]
                       + [f"{x:.6f}" for x in r.proportions])


def write_per_class_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(CLASS_NAMES) + ["micro_f1", "weighted_f1"])
        w.writerow([f"{x:.6f}" for x in report.per_class_f1] + [f"{report.micro_f1:.6f}", f"{report.weighted_f1:.6f}"])


def report_to_dict(report: InertiaReport) -> dict:
    return {"threshold": report.threshold, "flagged_fraction": report.flagged_fraction,
            "rows": [asdict(r) for r in report.rows]}
