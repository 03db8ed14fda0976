import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reconscan import evaluation as ev
from reconscan.data_pipeline import Label, Plane
from reconscan.errors import (
    EmptyDataError,
    MissingPlaneError,
    ShapeError,
    SingleClassError,
)
from reconscan.scoring import ScanLabel, Threshold, ThresholdKind

IN = ScanLabel.INLIER
OUT = ScanLabel.OUTLIER


def brute_force_auc(scored):
    """Pair-counting oracle: P(pos > neg) + half credit for ties."""
    positives = [s for s, l in scored if l == OUT]
    negatives = [s for s, l in scored if l == IN]
    total = 0.0
    for p in positives:
        for n in negatives:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(positives) * len(negatives))


class TestConfusion:
    def test_all_correct_outliers(self):
        cm = ev.confusion([(OUT, OUT)] * 5)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (5, 0, 0, 0)

    def test_46_scan_contingency(self):
        decisions = (
            [(OUT, OUT)] * 35  # true positives
            + [(IN, IN)] * 2  # true negatives
            + [(OUT, IN)] * 4  # false positives
            + [(IN, OUT)] * 5  # false negatives
        )
        cm = ev.confusion(decisions)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (35, 2, 4, 5)
        assert cm.total == 46

    def test_swapping_truth_swaps_quadrants(self):
        decisions = [(OUT, OUT), (OUT, IN), (IN, OUT), (IN, IN), (OUT, OUT)]
        flipped = [(p, IN if t == OUT else OUT) for p, t in decisions]
        cm = ev.confusion(decisions)
        sw = ev.confusion(flipped)
        assert (sw.fp, sw.tp, sw.fn, sw.tn) == (cm.tp, cm.fp, cm.tn, cm.fn)

    def test_empty(self):
        with pytest.raises(EmptyDataError):
            ev.confusion([])


class TestAccuracy:
    # fixed reference rows; the two-decimal reference values truncate
    # rather than round (e.g. 38/46 = 82.6086...% appears as 82.60)
    REFERENCE_ROWS = [
        ((35, 2, 4, 5), 80.43),
        ((36, 2, 4, 4), 82.60),
        ((37, 2, 4, 3), 84.78),
        ((37, 3, 3, 3), 86.95),
    ]

    @pytest.mark.parametrize("counts,expected", REFERENCE_ROWS)
    def test_reference_rows(self, counts, expected):
        tp, tn, fp, fn = counts
        value = ev.accuracy(ev.ConfusionMatrix(tp, tn, fp, fn))
        assert math.floor(value * 100) / 100 == pytest.approx(expected, abs=1e-9)

    def test_all_wrong(self):
        assert ev.accuracy(ev.ConfusionMatrix(0, 0, 3, 2)) == 0.0

    def test_empty(self):
        with pytest.raises(EmptyDataError):
            ev.accuracy(ev.ConfusionMatrix(0, 0, 0, 0))


class TestRocAuc:
    def test_perfect_separation(self):
        scored = [(0.1, IN), (0.2, IN), (0.8, OUT), (0.9, OUT)]
        points, auc = ev.roc_auc(scored)
        assert auc == 1.0
        assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)

    def test_all_tied_scores(self):
        scored = [(0.5, IN), (0.5, OUT), (0.5, IN), (0.5, OUT)]
        _, auc = ev.roc_auc(scored)
        assert auc == 0.5

    def test_hand_computed(self):
        scored = [(0.1, IN), (0.4, IN), (0.35, OUT), (0.8, OUT)]
        _, auc = ev.roc_auc(scored)
        assert auc == 0.75
        assert auc == brute_force_auc(scored)

    def test_single_class(self):
        with pytest.raises(SingleClassError):
            ev.roc_auc([(0.1, IN), (0.2, IN)])

    @given(
        scores=st.lists(st.floats(0, 1, allow_nan=False, width=16), min_size=2, max_size=40),
        labels=st.lists(st.booleans(), min_size=2, max_size=40),
    )
    @settings(max_examples=80, deadline=None)
    def test_matches_pair_counting(self, scores, labels):
        n = min(len(scores), len(labels))
        scored = [(scores[i], OUT if labels[i] else IN) for i in range(n)]
        kinds = {l for _, l in scored}
        if len(kinds) < 2:
            with pytest.raises(SingleClassError):
                ev.roc_auc(scored)
            return
        _, auc = ev.roc_auc(scored)
        assert auc == brute_force_auc(scored)

    @given(
        shift=st.floats(-5, 5, allow_nan=False),
        scale=st.floats(0.01, 100, allow_nan=False),
    )
    @settings(max_examples=40, deadline=None)
    def test_invariant_under_increasing_transform(self, shift, scale):
        rng = np.random.default_rng(7)
        scored = [
            (float(rng.random()), OUT if rng.random() > 0.5 else IN) for _ in range(30)
        ]
        if len({l for _, l in scored}) < 2:
            return
        _, base = ev.roc_auc(scored)
        _, moved = ev.roc_auc([(s * scale + shift, l) for s, l in scored])
        assert moved == pytest.approx(base, abs=1e-12)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(3)
        scored = [(float(rng.random()), OUT if i % 3 else IN) for i in range(20)]
        points, _ = ev.roc_auc(scored)
        assert points[0] == (0.0, 0.0)
        assert points[-1] == (1.0, 1.0)


class TestPsnr:
    def test_identical_is_infinite(self):
        x = np.random.default_rng(0).random((4, 4, 3))
        assert ev.psnr(x, x) == math.inf

    def test_unit_mse_is_zero_db(self):
        assert ev.psnr(np.ones((5, 5)), np.zeros((5, 5))) == pytest.approx(0.0)

    def test_forty_db(self):
        x = np.zeros((10, 10))
        y = np.full((10, 10), 0.01)  # MSE = 1e-4
        assert ev.psnr(x, y) == pytest.approx(40.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ev.psnr(np.zeros((2, 2)), np.zeros((3, 3)))

    @given(st.floats(1e-4, 0.5, allow_nan=False), st.floats(1.1, 3.0, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_strictly_decreasing_in_mse(self, err, factor):
        x = np.zeros((6, 6))
        smaller = ev.psnr(x, np.full((6, 6), err))
        larger = ev.psnr(x, np.full((6, 6), err * factor))
        assert larger < smaller


def threshold(value):
    return Threshold(ThresholdKind.AVG, value, "h")


class TestFusePlanes:
    def test_single_plane_degenerates(self):
        label, fused = ev.fuse_planes({Plane.AXIAL: (0.9, threshold(1.0))})
        assert label == IN
        assert fused == pytest.approx(0.9)
        label, _ = ev.fuse_planes({Plane.AXIAL: (1.2, threshold(1.0))})
        assert label == OUT

    def test_mean_rule_hand_computed(self):
        per_plane = {
            Plane.AXIAL: (0.8, threshold(1.0)),
            Plane.CORONAL: (1.4, threshold(1.0)),
        }
        label, fused = ev.fuse_planes(per_plane, ev.FusionRule.MEAN)
        assert fused == pytest.approx(1.1)
        assert label == OUT

    def test_any_rule(self):
        per_plane = {
            Plane.AXIAL: (0.5, threshold(1.0)),  # inlier vote
            Plane.CORONAL: (1.4, threshold(1.0)),  # outlier vote
        }
        label, _ = ev.fuse_planes(per_plane, ev.FusionRule.ANY)
        assert label == OUT
        label_mean, fused = ev.fuse_planes(per_plane, ev.FusionRule.MEAN)
        assert fused == pytest.approx(0.95)
        assert label_mean == IN

    def test_missing_plane(self):
        with pytest.raises(MissingPlaneError):
            ev.fuse_planes(
                {Plane.AXIAL: (1.0, threshold(1.0))},
                planes=[Plane.AXIAL, Plane.SAGITTAL],
            )


class TestBuildReport:
    def scores(self):
        means = {
            "h0": 0.10, "h1": 0.12, "a0": 0.30, "a1": 0.28, "a2": 0.05,
        }
        labels = {
            "h0": Label.HEALTHY, "h1": Label.HEALTHY,
            "a0": Label.ANOMALOUS, "a1": Label.ANOMALOUS, "a2": Label.ANOMALOUS,
        }
        return means, labels

    def test_single_plane_headline(self):
        means, labels = self.scores()
        report = ev.build_report(
            {Plane.AXIAL: means}, labels, {Plane.AXIAL: threshold(0.2)}
        )
        assert report.confusion.tp == 2
        assert report.confusion.tn == 2
        assert report.confusion.fn == 1
        assert report.accuracy_percent == pytest.approx(80.0)
        assert "axial" in report.per_plane

    def test_two_planes_fused(self):
        means, labels = self.scores()
        coronal = {k: v * 2 for k, v in means.items()}
        report = ev.build_report(
            {Plane.AXIAL: means, Plane.CORONAL: coronal},
            labels,
            {Plane.AXIAL: threshold(0.2), Plane.CORONAL: threshold(0.4)},
        )
        assert set(report.per_plane) == {"axial", "coronal"}
        # identical normalized scores: fusion must match the single plane
        assert report.accuracy_percent == pytest.approx(
            report.per_plane["axial"].accuracy_percent
        )

    def test_unknown_labels_skipped(self):
        means, labels = self.scores()
        labels["h1"] = Label.UNKNOWN
        report = ev.build_report(
            {Plane.AXIAL: means}, labels, {Plane.AXIAL: threshold(0.2)}
        )
        assert report.confusion.total == 4

    def test_report_json(self, tmp_path):
        means, labels = self.scores()
        report = ev.build_report(
            {Plane.AXIAL: means}, labels, {Plane.AXIAL: threshold(0.2)}
        )
        report.to_json(tmp_path / "report.json")
        text = (tmp_path / "report.json").read_text()
        assert '"accuracy_percent"' in text and '"per_plane"' in text
