"""Confusion matrices, macro-averaged metrics and (T, tau)-bucketed reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

CLASSES = ("CN", "MCI", "AD")


class EmptyReportError(ValueError):
    pass


class BucketDomainError(ValueError):
    pass


def bucket_domain(max_T: int = 4, max_sum: int = 5) -> list[tuple[int, int]]:
    return [(T, tau) for T in range(2, max_T + 1) for tau in range(1, max_sum - T + 1)]


def row_normalize(cm) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    cm = np.asarray(cm, dtype=float)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def summarize(cm) -> dict:
    """Accuracy, per-class precision/recall/F1 and their macro averages. 0/0 counts as 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyReportError("no samples accumulated")
    tp = np.diag(cm).astype(float)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return {
        "count": total,
        "accuracy": float(tp.sum() / total),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "precision": precision.tolist(),
        "recall": recall.tolist(),
        "f1": f1.tolist(),
    }


@dataclass
class EvalReport:
    overall: dict
    confusion: np.ndarray
    per_bucket: dict
    bucket_confusion: dict
    bucket_averaged: dict
    domain: list
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "bucket_averaged": self.bucket_averaged,
            "confusion": self.confusion.tolist(),
            "confusion_row_normalized": row_normalize(self.confusion).tolist(),
            "per_bucket": {f"{T},{tau}": v for (T, tau), v in sorted(self.per_bucket.items())},
            "bucket_confusion": {f"{T},{tau}": v.tolist() for (T, tau), v in sorted(self.bucket_confusion.items())},
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def bucket_grid(self) -> list[list[float | None]]:
        """F1 by row T = 2..max_T and column tau = 1..max_tau; None outside the domain or when empty."""
        Ts = sorted({T for T, _ in self.domain})
        taus = sorted({tau for _, tau in self.domain})
        return [[self.per_bucket[(T, tau)]["macro_f1"] if (T, tau) in self.per_bucket else None for tau in taus] for T in Ts]

    def bucket_grid_csv(self) -> str:
        Ts = sorted({T for T, _ in self.domain})
        taus = sorted({tau for _, tau in self.domain})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + [f"{6 * tau} months" for tau in taus])
        for T, row in zip(Ts, self.bucket_grid()):
            w.writerow([f"{T} visits"] + ["" if v is None else repr(v) for v in row])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted", *CLASSES])
        for name, row in zip(CLASSES, row_normalize(self.confusion)):
            w.writerow([name, *(repr(float(x)) for x in row)])
        return buf.getvalue()


class ReportBuilder:
    """Accumulates (true, predicted) pairs overall and per (T, tau) bucket."""

    def __init__(self, max_T: int = 4, max_sum: int = 5):
        self.max_T = max_T
        self.max_sum = max_sum
        self.domain = bucket_domain(max_T, max_sum)
        self._domain_set = set(self.domain)
        self.confusion = np.zeros((3, 3), dtype=np.int64)
        self.buckets: dict[tuple[int, int], np.ndarray] = {}

    def accumulate(self, true_label: int, predicted_label: int, bucket: tuple[int, int]) -> None:
        bucket = (int(bucket[0]), int(bucket[1]))
        if bucket not in self._domain_set:
            raise BucketDomainError(f"bucket {bucket} is outside the (T, tau) domain")
        if not (0 <= true_label < 3 and 0 <= predicted_label < 3):
            raise ValueError(f"labels must be in {{0, 1, 2}}, got {true_label}, {predicted_label}")
        self.confusion[true_label, predicted_label] += 1
        cm = self.buckets.setdefault(bucket, np.zeros((3, 3), dtype=np.int64))
        cm[true_label, predicted_label] += 1

    def accumulate_many(self, true_labels, predicted, buckets) -> None:
        for y, p, b in zip(true_labels, predicted, buckets):
            self.accumulate(int(y), int(p), b)

    def merge(self, other: "ReportBuilder") -> "ReportBuilder":
        if other.domain != self.domain:
            raise BucketDomainError("cannot merge builders with different bucket domains")
        out = ReportBuilder(self.max_T, self.max_sum)
        out.confusion = self.confusion + other.confusion
        for src in (self.buckets, other.buckets):
            for b, cm in src.items():
                out.buckets[b] = out.buckets.get(b, np.zeros((3, 3), dtype=np.int64)) + cm
        return out

    @property
    def count(self) -> int:
        return int(self.confusion.sum())

    def finalize(self) -> EvalReport:
        if self.count == 0:
            raise EmptyReportError("cannot finalize a report with no accumulated samples")
        overall = summarize(self.confusion)
        per_bucket = {b: summarize(cm) for b, cm in sorted(self.buckets.items())}
        keys = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
        bucket_avg = {k: float(np.mean([v[k] for v in per_bucket.values()])) for k in keys}
        return EvalReport(
            overall=overall,
            confusion=self.confusion.copy(),
            per_bucket=per_bucket,
            bucket_confusion={b: cm.copy() for b, cm in sorted(self.buckets.items())},
            bucket_averaged=bucket_avg,
            domain=list(self.domain),
        )
