"""Detection metrics: confusion counts, accuracy, ROC/AUC, PSNR, and
multi-plane fusion.

The outlier (anomalous) call is the positive class. AUC comes from a
threshold-sweep ROC integrated with the trapezoidal rule; tied scores
collapse into single sweep points, which makes the integral equal the
rank statistic P(score_pos > score_neg) + 0.5 * P(tie) exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data_pipeline import Label, Plane
from .errors import (
    EmptyDataError,
    MissingPlaneError,
    ShapeError,
    SingleClassError,
)
from .scoring import ScanLabel, Threshold


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def confusion(decisions: list[tuple[ScanLabel, ScanLabel]]) -> ConfusionMatrix:
    """Count (predicted, true) pairs; OUTLIER is the positive class."""
    if not decisions:
        raise EmptyDataError("no decisions to tally")
    tp = tn = fp = fn = 0
    for predicted, true in decisions:
        predicted = ScanLabel(predicted)
        true = ScanLabel(true)
        if true == ScanLabel.OUTLIER:
            if predicted == ScanLabel.OUTLIER:
                tp += 1
            else:
                fn += 1
        else:
            if predicted == ScanLabel.OUTLIER:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def accuracy(cm: ConfusionMatrix) -> float:
    """Percent of correct calls: 100 * (TP + TN) / total."""
    if cm.total == 0:
        raise EmptyDataError("empty confusion matrix")
    return 100.0 * (cm.tp + cm.tn) / cm.total


def roc_auc(
    scored: list[tuple[float, ScanLabel]]
) -> tuple[list[tuple[float, float]], float]:
    """Threshold-sweep ROC (higher score means more outlier-like) and its AUC.

    Returns (points, auc) where points step from (0, 0) to (1, 1). Tied
    scores advance both axes at once, so the trapezoidal area equals the
    pair-counting statistic with half credit for ties.
    """
    if not scored:
        raise EmptyDataError("no scores to rank")
    n_pos = sum(1 for _, label in scored if ScanLabel(label) == ScanLabel.OUTLIER)
    n_neg = len(scored) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"ROC needs both classes (got {n_pos} outliers, {n_neg} inliers)"
        )
    ordered = sorted(scored, key=lambda item: -item[0])
    points = [(0.0, 0.0)]
    tp = fp = 0
    area_twice = 0  # accumulates 2 * (pairs won) + ties as exact integers
    i = 0
    while i < len(ordered):
        j = i
        tp_add = fp_add = 0
        while j < len(ordered) and ordered[j][0] == ordered[i][0]:
            if ScanLabel(ordered[j][1]) == ScanLabel.OUTLIER:
                tp_add += 1
            else:
                fp_add += 1
            j += 1
        area_twice += fp_add * (2 * tp + tp_add)
        tp += tp_add
        fp += fp_add
        points.append((fp / n_neg, tp / n_pos))
        i = j
    auc = area_twice / (2 * n_pos * n_neg)
    return points, auc


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for unit-peak data; +inf at zero MSE."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


class FusionRule(str, Enum):
    MEAN = "mean"  # average of threshold-normalized scores, decided against 1.0
    ANY = "any"  # outlier if any plane says outlier


def fuse_planes(
    per_plane: dict[Plane, tuple[float, Threshold]],
    rule: FusionRule = FusionRule.MEAN,
    planes: list[Plane] | None = None,
    *,
    ties_outlier: bool = False,
) -> tuple[ScanLabel, float]:
    """Combine one scan's per-plane (score, threshold) pairs into one call.

    MEAN keeps a continuous fused score (mean of score/threshold, outlier
    when it exceeds 1.0); ANY votes outlier if any single plane does and
    reports the max normalized score.
    """
    rule = FusionRule(rule)
    if not per_plane:
        raise MissingPlaneError("no planes to fuse")
    wanted = planes if planes is not None else sorted(per_plane, key=lambda p: p.value)
    missing = [p for p in wanted if p not in per_plane]
    if missing:
        raise MissingPlaneError(
            f"missing plane(s) {[p.value for p in missing]} for fusion"
        )
    normalized = [per_plane[p][0] / per_plane[p][1].value for p in wanted]
    if rule == FusionRule.MEAN:
        fused = sum(normalized) / len(normalized)
        if fused > 1.0:
            label = ScanLabel.OUTLIER
        elif fused < 1.0:
            label = ScanLabel.INLIER
        else:
            label = ScanLabel.OUTLIER if ties_outlier else ScanLabel.INLIER
        return label, fused
    votes = []
    for p in wanted:
        score, threshold = per_plane[p]
        if score > threshold.value:
            votes.append(ScanLabel.OUTLIER)
        elif score < threshold.value:
            votes.append(ScanLabel.INLIER)
        else:
            votes.append(ScanLabel.OUTLIER if ties_outlier else ScanLabel.INLIER)
    label = (
        ScanLabel.OUTLIER if any(v == ScanLabel.OUTLIER for v in votes) else ScanLabel.INLIER
    )
    return label, max(normalized)


def true_scan_label(label: Label) -> ScanLabel | None:
    """Map a dataset label onto the inlier/outlier axis (None for unknown)."""
    if label == Label.HEALTHY:
        return ScanLabel.INLIER
    if label == Label.ANOMALOUS:
        return ScanLabel.OUTLIER
    return None


@dataclass
class PlaneReport:
    plane: str
    threshold: dict
    confusion: ConfusionMatrix
    accuracy_percent: float
    roc_points: list[tuple[float, float]]
    auc: float
    scan_scores: dict[str, float]
    scan_calls: dict[str, str]

    def as_dict(self) -> dict:
        return {
            "plane": self.plane,
            "threshold": self.threshold,
            "confusion": self.confusion.as_dict(),
            "accuracy_percent": self.accuracy_percent,
            "auc": self.auc,
            "roc_points": [list(p) for p in self.roc_points],
            "scan_scores": dict(sorted(self.scan_scores.items())),
            "scan_calls": dict(sorted(self.scan_calls.items())),
        }


@dataclass
class EvalReport:
    """Headline metrics plus per-plane sub-reports and the fusion rule used."""

    confusion: ConfusionMatrix
    accuracy_percent: float
    roc_points: list[tuple[float, float]]
    auc: float
    per_plane: dict[str, PlaneReport] = field(default_factory=dict)
    fusion_rule: str = FusionRule.MEAN.value

    def as_dict(self) -> dict:
        return {
            "confusion": self.confusion.as_dict(),
            "accuracy_percent": self.accuracy_percent,
            "auc": self.auc,
            "roc_points": [list(p) for p in self.roc_points],
            "per_plane": {k: v.as_dict() for k, v in sorted(self.per_plane.items())},
            "fusion_rule": self.fusion_rule,
        }

    def to_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))


def _plane_report(
    plane: Plane,
    scan_means: dict[str, float],
    truths: dict[str, ScanLabel],
    threshold: Threshold,
    ties_outlier: bool,
) -> PlaneReport:
    from .scoring import classify_scan

    calls = {
        scan: classify_scan(score, threshold, ties_outlier=ties_outlier)
        for scan, score in scan_means.items()
        if scan in truths
    }
    decisions = [(calls[scan], truths[scan]) for scan in sorted(calls)]
    cm = confusion(decisions)
    points, auc = roc_auc(
        [(scan_means[scan], truths[scan]) for scan in sorted(calls)]
    )
    return PlaneReport(
        plane=plane.value,
        threshold=threshold.as_dict(),
        confusion=cm,
        accuracy_percent=accuracy(cm),
        roc_points=points,
        auc=auc,
        scan_scores={scan: scan_means[scan] for scan in calls},
        scan_calls={scan: calls[scan].value for scan in calls},
    )


def build_report(
    per_plane_means: dict[Plane, dict[str, float]],
    labels: dict[str, Label],
    thresholds: dict[Plane, Threshold],
    rule: FusionRule = FusionRule.MEAN,
    *,
    ties_outlier: bool = False,
) -> EvalReport:
    """Assemble per-plane reports and, with several planes, the fused one.

    Scans without a known label are skipped; single-plane reports reuse
    that plane's metrics as the headline numbers.
    """
    rule = FusionRule(rule)
    if not per_plane_means:
        raise EmptyDataError("no plane scores to evaluate")
    truths: dict[str, ScanLabel] = {}
    some_plane = next(iter(per_plane_means.values()))
    for scan in some_plane:
        truth = true_scan_label(labels.get(scan, Label.UNKNOWN))
        if truth is not None:
            truths[scan] = truth
    if not truths:
        raise EmptyDataError("no labeled scans to evaluate")

    planes = sorted(per_plane_means, key=lambda p: p.value)
    reports = {
        plane.value: _plane_report(
            plane, per_plane_means[plane], truths, thresholds[plane], ties_outlier
        )
        for plane in planes
    }

    if len(planes) == 1:
        only = reports[planes[0].value]
        return EvalReport(
            confusion=only.confusion,
            accuracy_percent=only.accuracy_percent,
            roc_points=only.roc_points,
            auc=only.auc,
            per_plane=reports,
            fusion_rule=rule.value,
        )

    fused_calls: dict[str, ScanLabel] = {}
    fused_scores: dict[str, float] = {}
    for scan in sorted(truths):
        per_plane = {
            plane: (per_plane_means[plane][scan], thresholds[plane])
            for plane in planes
            if scan in per_plane_means[plane]
        }
        label, fused = fuse_planes(
            per_plane, rule, planes=planes, ties_outlier=ties_outlier
        )
        fused_calls[scan] = label
        fused_scores[scan] = fused
    decisions = [(fused_calls[s], truths[s]) for s in sorted(fused_calls)]
    cm = confusion(decisions)
    points, auc = roc_auc([(fused_scores[s], truths[s]) for s in sorted(fused_calls)])
    return EvalReport(
        confusion=cm,
        accuracy_percent=accuracy(cm),
        roc_points=points,
        auc=auc,
        per_plane=reports,
        fusion_rule=rule.value,
    )
