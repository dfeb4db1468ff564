"""Binary-classifier scoring: confusion matrix, threshold metrics, ROC
and AUC.

Malignant is the positive class. Metric ratios with a zero denominator
are reported as None ("undefined" in serialized output), never coerced
to 0 or 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyPredictionsError,
    PredictionParseError,
    SingleClassError,
)

POSITIVE_LABEL = "malignant"
NEGATIVE_LABEL = "benign"
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class PredictionRow:
    path: str
    true_label: str
    score: float


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    precision: float | None = None
    f1: float | None = None
    roc: list[tuple[float, float]] = field(default_factory=list)
    auc: float | None = None


def confusion(rows: list[PredictionRow], threshold: float) -> tuple[int, int, int, int]:
    """Counts (tp, fp, fn, tn); predicted malignant iff score >= threshold."""
    if not rows:
        raise EmptyPredictionsError("no prediction rows")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must be in [0, 1]")
    tp = fp = fn = tn = 0
    for r in rows:
        positive = r.score >= threshold
        truth_positive = r.true_label == POSITIVE_LABEL
        if positive and truth_positive:
            tp += 1
        elif positive:
            fp += 1
        elif truth_positive:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics(tp: int, fp: int, fn: int, tn: int,
            threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Scalar metrics from a confusion matrix; 0/0 stays None."""
    total = tp + fp + fn + tn
    if total == 0:
        raise EmptyPredictionsError("empty confusion matrix")
    sensitivity = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    if precision is None or sensitivity is None or precision + sensitivity == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
    return EvalReport(
        tp=tp, fp=fp, fn=fn, tn=tn, threshold=threshold,
        accuracy=(tp + tn) / total,
        sensitivity=sensitivity,
        specificity=_ratio(tn, tn + fp),
        precision=precision,
        f1=f1,
    )


def roc_auc(rows: list[PredictionRow]) -> tuple[list[tuple[float, float]], float]:
    """ROC points swept over every distinct score, and trapezoidal AUC.

    The curve runs from (0, 0) to (1, 1) with both coordinates
    non-decreasing. Requires both classes present.
    """
    if not rows:
        raise EmptyPredictionsError("no prediction rows")
    truth = np.array([r.true_label == POSITIVE_LABEL for r in rows])
    scores = np.array([r.score for r in rows])
    n_pos = int(truth.sum())
    n_neg = len(rows) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC needs at least one row of each class")

    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    truth = truth[order]
    # Threshold drops below each distinct score in turn; ties move together.
    distinct = np.nonzero(np.diff(scores))[0]
    cut_indices = np.concatenate([distinct, [len(scores) - 1]])
    cum_tp = np.cumsum(truth)
    cum_fp = np.cumsum(~truth)
    tpr = np.concatenate([[0.0], cum_tp[cut_indices] / n_pos])
    fpr = np.concatenate([[0.0], cum_fp[cut_indices] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def parse_predictions_csv(path) -> list[PredictionRow]:
    """Read a path,true_label,score CSV (header required).

    Raises PredictionParseError with the offending 1-based line number,
    EmptyPredictionsError for a header-only file.
    """
    rows: list[PredictionRow] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["path", "true_label", "score"]:
            raise PredictionParseError("expected header path,true_label,score", line=1)
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) < 3:
                raise PredictionParseError(f"expected 3 columns, got {len(raw)}", line=lineno)
            label = raw[1].strip().lower()
            if label not in (POSITIVE_LABEL, NEGATIVE_LABEL):
                raise PredictionParseError(f"unknown label {raw[1]!r}", line=lineno)
            try:
                score = float(raw[2])
            except ValueError:
                raise PredictionParseError(f"bad score {raw[2]!r}", line=lineno) from None
            if not (0.0 <= score <= 1.0) or not np.isfinite(score):
                raise PredictionParseError(f"score {score} outside [0, 1]", line=lineno)
            rows.append(PredictionRow(path=raw[0], true_label=label, score=score))
    if not rows:
        raise EmptyPredictionsError(f"{path}: no prediction rows")
    return rows


def evaluate(rows: list[PredictionRow], threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Full report: confusion at threshold, scalar metrics, ROC, AUC."""
    tp, fp, fn, tn = confusion(rows, threshold)
    report = metrics(tp, fp, fn, tn, threshold)
    report.roc, report.auc = roc_auc(rows)
    return report


def evaluate_file(pred_csv, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    return evaluate(parse_predictions_csv(pred_csv), threshold)


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def report_to_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["threshold", "tp", "fp", "fn", "tn", "accuracy",
                         "sensitivity", "specificity", "precision", "f1", "auc"])
        writer.writerow([report.threshold, report.tp, report.fp, report.fn,
                         report.tn, _fmt(report.accuracy), _fmt(report.sensitivity),
                         _fmt(report.specificity), _fmt(report.precision),
                         _fmt(report.f1), _fmt(report.auc)])


def report_to_text(report: EvalReport) -> str:
    """Human-readable table with the usual column order."""
    headers = ["Test Accuracy", "Specificity", "Sensitivity", "F1 score", "AUC"]
    values = [_fmt(report.accuracy), _fmt(report.specificity),
              _fmt(report.sensitivity), _fmt(report.f1), _fmt(report.auc)]
    width = max(len(s) for s in headers + values) + 2
    lines = [
        "".join(h.ljust(width) for h in headers),
        "".join(v.ljust(width) for v in values),
        "",
        f"confusion @ {report.threshold:g}: "
        f"tp={report.tp} fp={report.fp} fn={report.fn} tn={report.tn}",
    ]
    return "\n".join(lines)
