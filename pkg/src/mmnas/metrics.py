"""Binary classification metrics, ROC/AUC, and cross-validation pooling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_COLUMNS = ("acc", "sen", "spe", "pre", "f1", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError(f"confusion counts must be nonnegative: {self}")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class ScoredCase:
    id: str
    label: int
    score: float  # probability of the positive (DM) class

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"{self.id}: label must be 0 or 1")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"{self.id}: score {self.score} outside [0, 1]")


def binary_metrics(counts: ConfusionCounts) -> tuple[float, float, float, float, float]:
    """(accuracy, sensitivity, specificity, precision, F1)."""
    if counts.positives == 0 or counts.negatives == 0:
        raise ValueError("need at least one positive and one negative case")
    tp, fn, tn, fp = counts.tp, counts.fn, counts.tn, counts.fp
    acc = (tp + tn) / (tp + fn + tn + fp)
    sen = tp / (tp + fn)
    spe = tn / (tn + fp)
    pre = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * pre * sen / (pre + sen) if pre + sen else 0.0
    return acc, sen, spe, pre, f1


def _split_scores(cases: Sequence[ScoredCase]) -> tuple[np.ndarray, np.ndarray]:
    y = np.array([c.label for c in cases])
    s = np.array([c.score for c in cases], dtype=np.float64)
    return s, y


def auc_mann_whitney(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr), predicting positive when score >= threshold.

    Thresholds run from +inf through every unique score down to -inf.
    """
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    pts = [(float("inf"), 0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        pts.append((float(t), int((hit & (labels == 0)).sum()) / n_neg,
                    int((hit & (labels == 1)).sum()) / n_pos))
    pts.append((float("-inf"), 1.0, 1.0))
    return pts


def trapezoid_area(points: Sequence[tuple[float, float, float]]) -> float:
    area = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_and_auc(cases: Sequence[ScoredCase]) -> tuple[list[tuple[float, float, float]], float]:
    s, y = _split_scores(cases)
    if len(set(y.tolist())) < 2:
        raise ValueError("ROC/AUC need both classes present")
    return roc_points(s, y), auc_mann_whitney(s, y)


def confusion(cases: Sequence[ScoredCase], threshold: float = 0.5) -> ConfusionCounts:
    tp = fn = tn = fp = 0
    for c in cases:
        pred = c.score >= threshold
        if c.label == 1:
            tp += pred
            fn += not pred
        else:
            fp += pred
            tn += not pred
    return ConfusionCounts(int(tp), int(fn), int(tn), int(fp))


@dataclass
class EvalReport:
    counts: ConfusionCounts
    acc: float
    sen: float
    spe: float
    pre: float
    f1: float
    auc: float
    roc: list[tuple[float, float, float]]
    folds: list["EvalReport | None"] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


def evaluate_cases(cases: Sequence[ScoredCase], threshold: float = 0.5) -> EvalReport:
    counts = confusion(cases, threshold)
    acc, sen, spe, pre, f1 = binary_metrics(counts)
    roc, auc = roc_and_auc(cases)
    return EvalReport(counts, acc, sen, spe, pre, f1, auc, roc)


def aggregate_cv(per_fold_cases: Sequence[Sequence[ScoredCase]], threshold: float = 0.5) -> EvalReport:
    """Pool every fold's test cases into one report; per-fold reports ride along.

    A fold lacking one class gets ``None`` as its sub-report.
    """
    seen: set[str] = set()
    pooled: list[ScoredCase] = []
    for fold in per_fold_cases:
        for c in fold:
            if c.id in seen:
                raise ValueError(f"case {c.id!r} appears in more than one fold")
            seen.add(c.id)
            pooled.append(c)
    report = evaluate_cases(pooled, threshold)
    for fold in per_fold_cases:
        labels = {c.label for c in fold}
        report.folds.append(evaluate_cases(fold, threshold) if labels == {0, 1} else None)
    return report


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report_csv(rows: Sequence[tuple[str, EvalReport]], path) -> None:
    """One row per method/config: name, confusion counts, the six summary metrics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "tp", "fn", "tn", "fp", *METRIC_COLUMNS])
        for name, r in rows:
            c = r.counts
            w.writerow([name, c.tp, c.fn, c.tn, c.fp, *(_fmt(getattr(r, k)) for k in METRIC_COLUMNS)])


def write_roc_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in report.roc:
            w.writerow([_fmt(t), _fmt(fpr), _fmt(tpr)])


def write_scores_csv(cases: Sequence[ScoredCase], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score"])
        for c in cases:
            w.writerow([c.id, c.label, _fmt(c.score)])


def read_scores_csv(path) -> list[ScoredCase]:
    with open(path, newline="") as fh:
        return [ScoredCase(r["id"], int(r["label"]), float(r["score"])) for r in csv.DictReader(fh)]
