"""Per-window reconstruction distances, training-derived thresholds, and
scan classification.

A score table holds every window's distance keyed by scan; thresholds are
computed from the healthy training table (mean of per-scan means by
default) and each test scan is called an inlier or outlier by comparing
its mean window distance against the threshold. Ties resolve to inlier
unless the strict tie rule is requested.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data_pipeline import Label, Plane, WindowPair
from .errors import ConfigError, EmptyDataError, GeometryError, NonFiniteError
from .losses import cosine_distance, l2_loss


class DistanceMetric(str, Enum):
    L2 = "l2"
    COSINE = "cosine"
    L2_PLUS_COSINE = "l2+cosine"


class ScanLabel(str, Enum):
    INLIER = "inlier"
    OUTLIER = "outlier"


class ThresholdKind(str, Enum):
    AVG = "avg"
    MAX = "max"
    MIN = "min"


def window_score(model, pair: WindowPair, metric: DistanceMetric) -> float:
    """Distance between the model's reconstruction and the window target.

    ``model`` is anything mapping an (H, W, C) stack to an (H, W, C_out)
    stack; trained models are checked against the pair's plane/geometry.
    """
    metric = DistanceMetric(metric)
    plane = getattr(model, "plane", None)
    if plane is not None and plane != pair.plane:
        raise GeometryError(
            f"model trained on {plane.value} cannot score a {pair.plane.value} window"
        )
    spec = getattr(model, "spec", None)
    if spec is not None:
        h, w, c = pair.input.data.shape
        if (spec.height, spec.width, spec.in_channels) != (h, w, c):
            raise GeometryError(
                f"model geometry {spec.height}x{spec.width}x{spec.in_channels} "
                f"does not match window {h}x{w}x{c}"
            )
    recon = np.asarray(model(pair.input.data))
    target = pair.target.data
    if recon.shape != target.shape:
        raise GeometryError(
            f"reconstruction shape {recon.shape} does not match target {target.shape}"
        )
    if metric == DistanceMetric.L2:
        return float(l2_loss(recon, target))
    if metric == DistanceMetric.COSINE:
        return float(cosine_distance(recon, target))
    return float(l2_loss(recon, target)) + float(cosine_distance(recon, target))


@dataclass
class ScoreTable:
    """Window scores grouped by scan, with the subject map alongside."""

    metric: DistanceMetric
    scores: dict[str, list[float]]  # scan_id -> ordered window scores
    subjects: dict[str, str]  # scan_id -> subject_id
    labels: dict[str, Label] | None = None
    plane: Plane | None = None

    @property
    def n_scans(self) -> int:
        return len(self.scores)

    def windows_per_scan(self) -> dict[str, int]:
        return {scan: len(vals) for scan, vals in self.scores.items()}

    def scan_mean(self, scan_id: str) -> float:
        values = self.scores[scan_id]
        return sum(values) / len(values)

    def scan_means(self) -> dict[str, float]:
        return {scan: self.scan_mean(scan) for scan in self.scores}

    def subject_groups(self) -> dict[str, list[float]]:
        groups: dict[str, list[float]] = {}
        for scan, values in self.scores.items():
            groups.setdefault(self.subjects[scan], []).extend(values)
        return groups

    def table_hash(self) -> str:
        canonical = json.dumps(
            {
                "metric": self.metric.value,
                "scores": {k: self.scores[k] for k in sorted(self.scores)},
                "subjects": {k: self.subjects[k] for k in sorted(self.subjects)},
            },
            sort_keys=True,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "scan_id", "window_index", "score"])
            for scan, values in self.scores.items():
                for j, score in enumerate(values):
                    writer.writerow([self.subjects[scan], scan, j, repr(score)])

    def to_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "metric": self.metric.value,
            "plane": self.plane.value if self.plane else None,
            "scans": [
                {
                    "scan_id": scan,
                    "subject_id": self.subjects[scan],
                    "label": self.labels[scan].value
                    if self.labels and scan in self.labels
                    else None,
                    "mean": self.scan_mean(scan),
                    "scores": values,
                }
                for scan, values in sorted(self.scores.items())
            ],
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "ScoreTable":
        data = json.loads(Path(path).read_text())
        scores = {row["scan_id"]: list(row["scores"]) for row in data["scans"]}
        subjects = {row["scan_id"]: row["subject_id"] for row in data["scans"]}
        labels = {
            row["scan_id"]: Label(row["label"])
            for row in data["scans"]
            if row.get("label")
        }
        return cls(
            metric=DistanceMetric(data["metric"]),
            scores=scores,
            subjects=subjects,
            labels=labels or None,
            plane=Plane(data["plane"]) if data.get("plane") else None,
        )


def build_score_table(
    model,
    windows: list[WindowPair],
    metric: DistanceMetric,
    labels: dict[str, Label] | None = None,
) -> ScoreTable:
    """Score every window and group the results by scan."""
    if not windows:
        raise EmptyDataError("no windows to score")
    metric = DistanceMetric(metric)
    scores: dict[str, list[float]] = {}
    subjects: dict[str, str] = {}
    plane = windows[0].plane
    for pair in windows:
        scores.setdefault(pair.scan_id, []).append(window_score(model, pair, metric))
        subjects[pair.scan_id] = pair.subject_id
    return ScoreTable(
        metric=metric, scores=scores, subjects=subjects, labels=labels, plane=plane
    )


@dataclass(frozen=True)
class Threshold:
    kind: ThresholdKind
    value: float
    provenance: str  # hash of the training score table
    unit: str = "scan"

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "value": self.value,
            "provenance": self.provenance,
            "unit": self.unit,
        }


def compute_threshold(
    table: ScoreTable, kind: ThresholdKind, unit: str = "scan"
) -> Threshold:
    """AVG = mean of per-group means; MAX/MIN = extreme of per-group extremes.

    Groups are scans by default; ``unit="subject"`` pools each subject's
    windows before aggregating (the strict reading of the calibration
    formula, which iterates over subjects).
    """
    kind = ThresholdKind(kind)
    if unit == "scan":
        groups = list(table.scores.values())
    elif unit == "subject":
        groups = list(table.subject_groups().values())
    else:
        raise ConfigError(f"unknown threshold unit {unit!r}")
    if not groups or any(not g for g in groups):
        raise EmptyDataError("score table has no entries")
    if kind == ThresholdKind.AVG:
        value = sum(sum(g) / len(g) for g in groups) / len(groups)
    elif kind == ThresholdKind.MAX:
        value = max(max(g) for g in groups)
    else:
        value = min(min(g) for g in groups)
    return Threshold(kind=kind, value=value, provenance=table.table_hash(), unit=unit)


def classify_scan(
    scan_mean: float, threshold: Threshold, *, ties_outlier: bool = False
) -> ScanLabel:
    """Inlier below the threshold, outlier above; ties are inliers unless
    the strict tie rule is on."""
    if not math.isfinite(scan_mean):
        raise NonFiniteError(f"cannot classify non-finite score {scan_mean}")
    if scan_mean < threshold.value:
        return ScanLabel.INLIER
    if scan_mean > threshold.value:
        return ScanLabel.OUTLIER
    return ScanLabel.OUTLIER if ties_outlier else ScanLabel.INLIER
