"""
Unit tests for evaluation mathematics.

Tests confusion metrics, detection matching, average precision, per-class
reports, edit distance and precision/recall curves.
"""

import numpy as np
import pytest

from extraction.core.geometry import BBox
from extraction.core.vocab import TextRole
from extraction.errors import DataError
from extraction.metrics import (ConfusionCounts, accuracy, average_precision, degenerate_metrics, f1,
                                f1_harmonic, map50, match_detections, per_class_report,
                                pr_curve, precision, recall, recognition_score)


def _brute_force_ap(labels, scores, total_gt):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = fp = 0
    precisions, recalls = [], []
    for i in order:
        if labels[i]:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / total_gt)
    ap, previous = 0.0, 0.0
    for k in range(len(order)):
        ap += (recalls[k] - previous) * max(precisions[k:])
        previous = recalls[k]
    return ap


def _dp_levenshtein(a, b):
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        for j, cb in enumerate(b, 1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def _threshold_sweep(scores, positives):
    """(precision, recall) at every distinct threshold, highest first."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    points = []
    for threshold in np.unique(scores)[::-1]:
        predicted = scores >= threshold
        tp = int((predicted & positives).sum())
        fp = int((predicted & ~positives).sum())
        points.append((float(threshold), tp / (tp + fp), tp / int(positives.sum())))
    return points


class TestConfusionMetrics:
    """Test count-based metrics."""

    def test_known_values(self):
        c = ConfusionCounts(tp=6, tn=3, fp=2, fn=1)
        assert accuracy(c) == pytest.approx(0.75)
        assert precision(c) == pytest.approx(0.75)
        assert recall(c) == pytest.approx(6 / 7)
        assert f1(c) == pytest.approx(12 / 15)

    def test_random_counts(self):
        """Test the metric identities over random counts."""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            tp, tn, fp, fn = (int(v) for v in rng.integers(0, 50, size=4))
            c = ConfusionCounts(tp, tn, fp, fn)
            for value in (accuracy(c), precision(c), recall(c), f1(c)):
                assert 0.0 <= value <= 1.0
            assert f1(c) == pytest.approx(f1_harmonic(precision(c), recall(c)))
            if fp == 0 and fn == 0 and tp > 0:
                assert f1(c) == 1.0

    def test_degenerate(self):
        c = ConfusionCounts(tp=0, tn=5, fp=0, fn=0)
        assert precision(c) == 0.0
        assert set(degenerate_metrics(c)) == {'precision', 'recall', 'f1'}
        assert degenerate_metrics(ConfusionCounts()) == ('accuracy', 'precision', 'recall', 'f1')

    def test_negative_counts(self):
        with pytest.raises(DataError):
            ConfusionCounts(tp=-1)

    def test_add(self):
        total = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1)
        assert total == ConfusionCounts(2, 3, 4, 5)
        assert total.total == 14


class TestDetectionMatching:
    """Test one-to-one matching and AP."""

    def test_duplicate_is_false_positive(self):
        gt = BBox(0, 0, 10, 10)
        match = match_detections([(BBox(0, 0, 10, 10), 0.9), (BBox(0, 0, 10, 9), 0.8)], [gt])
        assert match.labels == (True, False)
        assert match.fn == 0
        assert (match.tp, match.fp) == (1, 1)

    def test_highest_score_claims_first(self):
        gt = BBox(0, 0, 10, 10)
        match = match_detections([(BBox(0, 0, 10, 9), 0.3), (BBox(0, 0, 10, 10), 0.7)], [gt])
        assert match.scores == (0.7, 0.3)
        assert match.labels == (True, False)

    def test_below_threshold(self):
        match = match_detections([(BBox(0, 0, 10, 10), 0.5)], [BBox(5, 0, 15, 10)])
        assert match.labels == (False,)
        assert match.fn == 1

    def test_perfect_detection(self):
        gts = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
        assert map50([([(g, 0.9) for g in gts], gts)]) == pytest.approx(1.0)

    def test_no_predictions(self):
        assert map50([([], [BBox(0, 0, 1, 1)])]) == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(DataError):
            average_precision([True], [0.5], 0)
        with pytest.raises(DataError):
            map50([])

    def test_known_ap(self):
        # TP, FP, TP out of 2: precision 1 up to recall 0.5, then 2/3 up to 1.0
        assert average_precision([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_ap_against_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            scores = rng.permutation(n).astype(float).tolist()
            labels = (rng.random(n) < 0.5).tolist()
            total_gt = sum(labels) + int(rng.integers(0, 5))
            if total_gt == 0:
                continue
            ap = average_precision(labels, scores, total_gt)
            assert 0.0 <= ap <= 1.0
            assert ap == pytest.approx(_brute_force_ap(labels, scores, total_gt))

    def test_ap_ignores_monotone_rescaling(self):
        """Test that AP depends only on the score order."""
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            scores = rng.random(n)
            labels = (rng.random(n) < 0.5).tolist()
            total_gt = sum(labels) + int(rng.integers(1, 4))
            ap = average_precision(labels, scores.tolist(), total_gt)
            for rescaled in (np.exp(3.0 * scores) + 1.0, scores ** 3, 10.0 * scores - 7.0):
                assert average_precision(labels, rescaled.tolist(), total_gt) == pytest.approx(ap)


class TestClassReport:
    """Test per-class reports."""

    def test_report(self):
        roles = list(TextRole)
        true = [TextRole.TICK_LABEL, TextRole.TICK_LABEL, TextRole.AXIS_TITLE, TextRole.CHART_TITLE]
        pred = [TextRole.TICK_LABEL, TextRole.AXIS_TITLE, TextRole.AXIS_TITLE, TextRole.CHART_TITLE]
        report = per_class_report(true, pred, roles)

        assert report.accuracy == pytest.approx(0.75)
        assert report.support['tick-label'] == 2
        assert report.precision['axis-title'] == pytest.approx(0.5)
        assert report.recall['tick-label'] == pytest.approx(0.5)
        assert report.f1['chart-title'] == 1.0
        assert 'legend-title' in report.absent
        assert report.macro_f1 == pytest.approx(np.mean([2 / 3, 2 / 3, 1.0]))
        assert sum(map(sum, report.confusion)) == 4

    def test_to_dict(self):
        data = per_class_report(['a', 'b'], ['a', 'a'], ['a', 'b']).to_dict()
        assert set(data) == {'accuracy', 'macro', 'classes', 'absent', 'confusion'}
        assert data['classes']['b']['degenerate'] == ['precision']

    def test_rejects_unknown_label(self):
        with pytest.raises(DataError, match='outside the class set'):
            per_class_report(['a'], ['z'], ['a', 'b'])

    def test_rejects_length_mismatch(self):
        with pytest.raises(DataError):
            per_class_report(['a'], [], ['a'])


class TestRecognitionAndCurves:
    """Test edit distance, recognition scores and PR curves."""

    def test_edit_distance_against_dynamic_programming(self):
        rng = np.random.default_rng(6)
        alphabet = list('ab01.,-')
        for _ in range(300):
            p = ''.join(rng.choice(alphabet, size=int(rng.integers(0, 8))))
            r = ''.join(rng.choice(alphabet, size=int(rng.integers(0, 8))))
            expected = _dp_levenshtein(p, r) / max(len(p), len(r)) if (p or r) else 0.0
            assert recognition_score([p], [r]).edit_distance == pytest.approx(expected)
        assert recognition_score(['sitting'], ['kitten']).edit_distance == pytest.approx(3 / 7)
        assert recognition_score(['abc'], ['abd']).edit_distance == pytest.approx(1 / 3)

    def test_recognition_score(self):
        score = recognition_score(['2010', '2O11', ''], ['2010', '2011', ''])
        assert score.exact_match == pytest.approx(2 / 3)
        assert score.edit_distance == pytest.approx((0 + 0.25 + 0) / 3)
        assert score.count == 3

    def test_recognition_score_mismatch(self):
        with pytest.raises(DataError):
            recognition_score(['a'], [])

    def test_pr_curve(self):
        points = pr_curve([0.9, 0.8, 0.3, 0.3], [True, False, True, False])
        assert [p.threshold for p in points] == [0.9, 0.8, 0.3]
        assert (points[0].precision, points[0].recall) == (1.0, 0.5)
        assert (points[-1].precision, points[-1].recall) == (0.5, 1.0)

    def test_pr_curve_against_threshold_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            scores = np.round(rng.random(n), 1)
            positives = rng.random(n) < 0.4
            if not positives.any():
                continue
            points = pr_curve(scores, positives)
            expected = _threshold_sweep(scores, positives)
            # releases may stop at the first threshold reaching full recall
            assert 0 < len(points) <= len(expected)
            assert points[-1].recall == pytest.approx(1.0)
            for point, (threshold, prec, rec) in zip(points, expected):
                assert point.threshold == pytest.approx(threshold)
                assert point.precision == pytest.approx(prec)
                assert point.recall == pytest.approx(rec)

    def test_pr_curve_rejects_bad_input(self):
        with pytest.raises(DataError, match='positive'):
            pr_curve([0.2, 0.4], [False, False])
        with pytest.raises(DataError):
            pr_curve([0.2, 0.4], [True])
