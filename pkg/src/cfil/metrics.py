"""Verification metrics, ROC/AUC, fold aggregation and export.

Rates whose denominator is zero are *undefined* and come back as ``None``;
they are never reported as 0.
"""

from __future__ import annotations

import csv
import io
import math
import os
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import RELATIONS
from .errors import InputError

DEFAULT_THRESHOLD = 0.5
UNDEFINED = None


class UndefinedCurveError(ValueError):
    """ROC needs at least one positive and one negative label."""


class AggregationError(ValueError):
    """Fold reports cannot be combined."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    if s.size and (np.any(~np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0):
        raise InputError("scores must be probabilities in [0, 1]")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Counts with 'predict positive iff score >= threshold'."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold must lie in [0, 1], got {threshold}")
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def tpr(c: ConfusionCounts) -> Optional[float]:
    return c.tp / c.positives if c.positives else UNDEFINED


def fpr(c: ConfusionCounts) -> Optional[float]:
    return c.fp / c.negatives if c.negatives else UNDEFINED


def acc(c: ConfusionCounts) -> Optional[float]:
    """Accuracy in percent."""
    return float(Fraction(100 * (c.tp + c.tn), c.total)) if c.total else UNDEFINED


def wa(c: ConfusionCounts) -> Optional[float]:
    """Weighted accuracy, the mean of TPR and TNR, in percent.

    Both rates are exact rationals, so WA and ACC round to the same float
    whenever the classes are balanced.
    """
    if not c.positives or not c.negatives:
        return UNDEFINED
    return float(50 * (Fraction(c.tp, c.positives) + Fraction(c.tn, c.negatives)))


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


def roc_curve(scores, labels) -> list[RocPoint]:
    """One point per distinct score, ordered by decreasing threshold.

    The first point uses an infinite threshold (nothing predicted positive,
    i.e. (0, 0)); the lowest score predicts everything positive, so the
    curve ends at (1, 1).
    """
    s, y = _arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedCurveError("ROC curve needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted == 1)
    fp_cum = np.cumsum(y_sorted == 0)
    # last index of every run of equal scores
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    points = [RocPoint(math.inf, 0.0, 0.0)]
    for i in last:
        points.append(RocPoint(float(s_sorted[i]), float(fp_cum[i] / n_neg), float(tp_cum[i] / n_pos)))
    return points


def auc(points: Sequence[RocPoint]) -> float:
    """Trapezoidal area under (fpr, tpr)."""
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return float(area)


@dataclass
class EvalReport:
    fold: int
    counts: ConfusionCounts
    relation_counts: dict[str, ConfusionCounts]
    roc: list[RocPoint] = field(default_factory=list)
    auc: Optional[float] = None

    @property
    def relation_acc(self) -> dict[str, Optional[float]]:
        return {rel: acc(c) for rel, c in self.relation_counts.items()}

    @property
    def mva(self) -> Optional[float]:
        values = [v for v in self.relation_acc.values() if v is not None]
        return sum(values) / len(values) if values else UNDEFINED

    @property
    def wa(self) -> Optional[float]:
        return wa(self.counts)

    @property
    def acc(self) -> Optional[float]:
        return acc(self.counts)

    def rows(self) -> list[tuple[str, str, object]]:
        rows: list[tuple[str, str, object]] = [("fold", "id", self.fold)]
        for rel, value in self.relation_acc.items():
            rows.append(("acc", rel, value))
        rows += [
            ("acc", "overall", self.acc),
            ("mva", "overall", self.mva),
            ("wa", "overall", self.wa),
            ("tpr", "overall", tpr(self.counts)),
            ("fpr", "overall", fpr(self.counts)),
            ("auc", "overall", self.auc),
            ("count", "TP", self.counts.tp),
            ("count", "TN", self.counts.tn),
            ("count", "FP", self.counts.fp),
            ("count", "FN", self.counts.fn),
        ]
        return rows


def evaluate(scores, labels, relations: Sequence[str], fold: int = 0, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    s, y = _arrays(scores, labels)
    rel = np.asarray(relations)
    if rel.shape != s.shape:
        raise InputError(f"{s.size} scores but {rel.size} relation tags")
    per_relation = {}
    for name in RELATIONS:
        mask = rel == name
        if mask.any():
            per_relation[name] = confusion(s[mask], y[mask], threshold)
    report = EvalReport(fold, confusion(s, y, threshold), per_relation)
    if np.any(y == 1) and np.any(y == 0):
        report.roc = roc_curve(s, y)
        report.auc = auc(report.roc)
    return report


@dataclass
class AggregateSummary:
    folds: list[int]
    relation_acc: dict[str, float]
    mva: float
    wa: Optional[float]
    pooled: ConfusionCounts
    auc_mean: Optional[float]

    def rows(self) -> list[tuple[str, str, object]]:
        rows: list[tuple[str, str, object]] = [("folds", "count", len(self.folds))]
        rows += [("acc", rel, v) for rel, v in self.relation_acc.items()]
        rows += [("mva", "overall", self.mva), ("wa", "overall", self.wa), ("auc", "mean", self.auc_mean)]
        return rows


def aggregate(reports: Sequence[EvalReport]) -> AggregateSummary:
    """Per-relation means over folds, their unweighted mean (MVA), and WA from pooled counts."""
    if not reports:
        raise AggregationError("nothing to aggregate")
    relations = list(reports[0].relation_counts)
    for r in reports[1:]:
        if list(r.relation_counts) != relations:
            raise AggregationError(
                f"fold {r.fold} has relations {list(r.relation_counts)}, fold {reports[0].fold} has {relations}"
            )
    relation_acc = {}
    for rel in relations:
        values = [r.relation_acc[rel] for r in reports]
        relation_acc[rel] = sum(values) / len(values)
    pooled = ConfusionCounts()
    for r in reports:
        pooled = pooled + r.counts
    aucs = [r.auc for r in reports if r.auc is not None]
    return AggregateSummary(
        folds=[r.fold for r in reports],
        relation_acc=relation_acc,
        mva=sum(relation_acc.values()) / len(relation_acc),
        wa=wa(pooled),
        pooled=pooled,
        auc_mean=sum(aucs) / len(aucs) if aucs else None,
    )


# ---------------------------------------------------------------------------
# export


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def roc_csv(points: Sequence[RocPoint]) -> str:
    return _csv([("threshold", "fpr", "tpr"), *((p.threshold, p.fpr, p.tpr) for p in points)])


def read_roc_csv(text: str) -> list[RocPoint]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["threshold", "fpr", "tpr"]:
        raise ValueError("roc.csv must start with threshold,fpr,tpr")
    return [RocPoint(float(t), float(f), float(p)) for t, f, p in rows[1:]]


def roc_svg(points: Sequence[RocPoint], title: str = "ROC") -> str:
    """Small self-contained SVG of the curve with the chance diagonal."""
    size, pad = 320, 40
    span = size - 2 * pad

    def xy(p: RocPoint) -> str:
        return f"{pad + p.fpr * span:.3f},{size - pad - p.tpr * span:.3f}"

    auc_text = f" (AUC {auc(points):.4f})" if len(points) > 1 else ""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#000"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#999" stroke-dasharray="4 4"/>',
        f'<polyline fill="none" stroke="#c00" stroke-width="2" points="{" ".join(xy(p) for p in points)}"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">True positive rate</text>',
        f'<text x="{size / 2}" y="24" text-anchor="middle" font-size="13">{title}{auc_text}</text>',
        "</svg>",
    ]
    return "\n".join(lines) + "\n"


def export(report, out_dir: str | os.PathLike) -> list[Path]:
    """Write report.csv, plus roc.csv and roc.svg when the report has a curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.csv"
    path.write_text(_csv([("metric", "name", "value"), *report.rows()]), encoding="utf-8")
    written.append(path)
    roc = getattr(report, "roc", None)
    if roc:
        path = out / "roc.csv"
        path.write_text(roc_csv(roc), encoding="utf-8")
        written.append(path)
        path = out / "roc.svg"
        path.write_text(roc_svg(roc, title=f"ROC fold {report.fold}"), encoding="utf-8")
        written.append(path)
    return written
