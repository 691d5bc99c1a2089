"""Scoring predicted verdicts against labels.

Attack is the positive class everywhere. Review-labeled instances are
excluded from the matrix and counted; undecidable predictions count as
negative but are tallied separately so the abstention rate is never hidden
inside the true-negative cell. Degenerate metric denominators yield 0 with
an explicit flag instead of raising.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import LabelSetMismatch, NoOverlap, SingleClassLabels

POSITIVE = "attack"

_NEGATIVE_PREDICTIONS = ("benign", "no_attack", "no-attack")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass(frozen=True)
class ConfusionTally:
    """A matrix plus the bookkeeping the matrix alone would hide."""

    matrix: ConfusionMatrix
    excluded_count: int = 0
    undecidable_count: int = 0


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    auc: float | None = None
    excluded_count: int = 0
    undecidable_count: int = 0
    flags: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "matrix": self.matrix.to_dict(),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "roc_points": [[fpr, tpr] for fpr, tpr in self.roc_points],
            "auc": self.auc,
            "excluded_count": self.excluded_count,
            "undecidable_count": self.undecidable_count,
            "flags": list(self.flags),
        }


def _normalize_prediction(value: str) -> str:
    v = value.lower()
    if v == POSITIVE:
        return POSITIVE
    if v in _NEGATIVE_PREDICTIONS:
        return "benign"
    if v == "undecidable":
        return "undecidable"
    raise ValueError(f"unknown prediction value: {value!r}")


def confusion(
    predictions: Mapping[str, str], labels: Mapping[str, str]
) -> ConfusionTally:
    """Count TP/TN/FP/FN over the ids both sides know.

    Labels may be attack/benign/review; review rows are excluded and
    counted. Predictions may be attack/no-attack/benign/undecidable;
    undecidable counts as negative and is tallied.
    """
    common = sorted(set(predictions) & set(labels))
    if not common:
        raise NoOverlap("predictions and labels share no record ids")
    tp = tn = fp = fn = 0
    excluded = 0
    undecidable = 0
    for rid in common:
        label = labels[rid].lower()
        if label == "review":
            excluded += 1
            continue
        if label not in (POSITIVE, "benign"):
            raise ValueError(f"unknown label value: {labels[rid]!r}")
        pred = _normalize_prediction(predictions[rid])
        if pred == "undecidable":
            undecidable += 1
            pred = "benign"
        if label == POSITIVE:
            if pred == POSITIVE:
                tp += 1
            else:
                fn += 1
        else:
            if pred == POSITIVE:
                fp += 1
            else:
                tn += 1
    return ConfusionTally(
        matrix=ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn),
        excluded_count=excluded,
        undecidable_count=undecidable,
    )


def metrics(m: ConfusionMatrix | ConfusionTally, excluded_count: int = 0) -> EvalReport:
    """Accuracy, precision, recall, F1 from a confusion matrix.

    accuracy=(tp+tn)/total, precision=tp/(tp+fp), recall=tp/(tp+fn),
    f1=2PR/(P+R); a 0/0 denominator yields 0 with a flag.
    """
    undecidable = 0
    if isinstance(m, ConfusionTally):
        excluded_count = m.excluded_count
        undecidable = m.undecidable_count
        m = m.matrix
    flags: list[str] = []

    def ratio(num: int | float, den: int | float, name: str) -> float:
        if den == 0:
            flags.append(f"{name} denominator is zero; reported as 0")
            return 0.0
        return num / den

    accuracy = ratio(m.tp + m.tn, m.total, "accuracy")
    precision = ratio(m.tp, m.tp + m.fp, "precision")
    recall = ratio(m.tp, m.tp + m.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return EvalReport(
        matrix=m,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        excluded_count=excluded_count,
        undecidable_count=undecidable,
        flags=flags,
    )


def roc_auc(
    scored_predictions: Iterable[tuple[str, float]],
    labels: Mapping[str, str],
) -> tuple[list[tuple[float, float]], float]:
    """ROC points and trapezoidal AUC over descending score thresholds.

    Tied scores share one threshold step. Review labels are excluded here
    too. Raises SingleClassLabels when only one class is present.
    """
    pairs = []
    for rid, score in scored_predictions:
        if rid not in labels:
            continue
        label = labels[rid].lower()
        if label == "review":
            continue
        if not (score == score) or score in (float("inf"), float("-inf")):
            raise ValueError(f"confidence for {rid!r} is not finite")
        pairs.append((float(score), 1 if label == POSITIVE else 0))
    pos_total = sum(y for _, y in pairs)
    neg_total = len(pairs) - pos_total
    if pos_total == 0 or neg_total == 0:
        raise SingleClassLabels("ROC requires both classes")

    pairs.sort(key=lambda t: -t[0])
    points: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(pairs)
    while i < n:
        threshold = pairs[i][0]
        while i < n and pairs[i][0] == threshold:
            if pairs[i][1] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / neg_total, tp / pos_total))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))

    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return points, auc


def attach_roc(report: EvalReport, points: list[tuple[float, float]], auc: float) -> EvalReport:
    report.roc_points = points
    report.auc = auc
    return report


_METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


def compare_report(
    system: EvalReport,
    baseline: EvalReport,
    system_ids: Sequence[str] | None = None,
    baseline_ids: Sequence[str] | None = None,
) -> tuple[str, dict]:
    """Per-metric deltas (percentage points) between two reports.

    Both reports must come from the same label set: exact id comparison when
    ids are provided, otherwise matrix totals and exclusions must agree.
    """
    if system_ids is not None and baseline_ids is not None:
        if set(system_ids) != set(baseline_ids):
            raise LabelSetMismatch("reports cover different record ids")
    elif (
        system.matrix.total != baseline.matrix.total
        or system.excluded_count != baseline.excluded_count
    ):
        raise LabelSetMismatch("reports cover different label sets")

    deltas = {
        name: (getattr(system, name) - getattr(baseline, name)) * 100.0
        for name in _METRIC_NAMES
    }
    as_json = {
        "system": system.to_json_dict(),
        "baseline": baseline.to_json_dict(),
        "delta_pp": deltas,
    }
    lines = [
        "| metric | system | baseline | delta (pp) |",
        "|---|---|---|---|",
    ]
    for name in _METRIC_NAMES:
        lines.append(
            f"| {name} | {getattr(system, name) * 100:.2f}% "
            f"| {getattr(baseline, name) * 100:.2f}% "
            f"| {deltas[name]:+.2f} |"
        )
    return "\n".join(lines) + "\n", as_json


def write_report_files(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Emit report.json, report.md, and roc.csv into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "report.json",
        "md": out_dir / "report.md",
        "csv": out_dir / "roc.csv",
    }
    paths["json"].write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )

    m = report.matrix
    md = [
        "# Evaluation report",
        "",
        "| metric | value |",
        "|---|---|",
        f"| accuracy | {report.accuracy * 100:.2f}% |",
        f"| precision | {report.precision * 100:.2f}% |",
        f"| recall | {report.recall * 100:.2f}% |",
        f"| f1 | {report.f1 * 100:.2f}% |",
    ]
    if report.auc is not None:
        md.append(f"| auc | {report.auc:.4f} |")
    md += [
        "",
        "| | predicted attack | predicted benign |",
        "|---|---|---|",
        f"| label attack | {m.tp} | {m.fn} |",
        f"| label benign | {m.fp} | {m.tn} |",
        "",
        f"excluded (review): {report.excluded_count}",
        f"undecidable predictions (scored as benign): {report.undecidable_count}",
    ]
    if report.flags:
        md += ["", "flags: " + "; ".join(report.flags)]
    paths["md"].write_text("\n".join(md) + "\n", encoding="utf-8")

    with open(paths["csv"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in report.roc_points:
            writer.writerow([repr(fpr), repr(tpr)])
    return paths
