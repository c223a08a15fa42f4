"""
Unit tests for the grid text detector.

Tests box decoding, non-maximum suppression, block merging, anchor
clustering, target assignment, the loss and inference.
"""

import math

import numpy as np
import pytest
import torch

from extraction.config import DetectorConfig, TrainSchedule
from extraction.core.context import StageContext
from extraction.core.geometry import BBox, iou
from extraction.core.records import LabeledImage
from extraction.data.synthetic import generate_synthetic
from extraction.errors import DataError, ModelError
from extraction.models.detector import (Detection, GridDetector, GridTextDetector, assign_targets, decode_grid,
                                        detect, detection_loss, kmeans_anchors, merge_logical_blocks, nms,
                                        train_detector)


def _oracle_nms(dets, threshold):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].objectness)
    kept = []
    for i in order:
        if all(iou(dets[i].box, dets[k].box) <= threshold for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def _random_detections(rng, n):
    dets = []
    for _ in range(n):
        x, y = rng.uniform(0, 50, size=2)
        w, h = rng.uniform(2, 20, size=2)
        dets.append(Detection(BBox(x, y, x + w, y + h), float(rng.random())))
    return dets


class TestDecoding:
    """Test decoding raw head outputs."""

    def test_zero_output(self, tiny_detector):
        """Test a zero head puts every anchor at its cell center with objectness 0.5."""
        dets = decode_grid([torch.zeros(8, 8, 2, 5)], tiny_detector)
        assert len(dets) == 8 * 8 * 2
        assert dets[0].box.as_list() == [-2.0, 1.0, 10.0, 7.0]
        assert dets[1].box.as_list() == [-8.0, 0.0, 16.0, 8.0]
        assert dets[2].box.center == (12.0, 4.0)
        assert all(d.objectness == 0.5 for d in dets)

    def test_size_offsets(self, tiny_detector):
        raw = torch.zeros(8, 8, 2, 5)
        raw[0, 0, 0, 2] = math.log(2.0)
        box = decode_grid([raw], tiny_detector)[0].box
        assert box.width == pytest.approx(24.0)
        assert box.height == pytest.approx(6.0)

    def test_shape_mismatch(self, tiny_detector):
        with pytest.raises(ModelError):
            decode_grid([torch.zeros(4, 4, 2, 5)], tiny_detector)
        with pytest.raises(ModelError):
            decode_grid([], tiny_detector)

    def test_network_output_shapes(self, tiny_detector):
        raws = GridDetector(tiny_detector)(torch.zeros(2, 3, 64, 64))
        assert len(raws) == 1
        assert raws[0].shape == (2, 8, 8, 2, 5)

    def test_two_scales(self):
        config = DetectorConfig()
        raws = GridDetector(config)(torch.zeros(1, 3, 192, 192))
        assert [tuple(r.shape) for r in raws] == [(1, 24, 24, 2, 5), (1, 12, 12, 2, 5)]


class TestNMS:
    """Test greedy non-maximum suppression."""

    def test_suppresses_overlap(self):
        a = Detection(BBox(0, 0, 10, 10), 0.9)
        b = Detection(BBox(1, 0, 11, 10), 0.8)
        c = Detection(BBox(30, 30, 40, 40), 0.7)
        assert nms([b, c, a], 0.5) == [a, c]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_against_quadratic_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            dets = _random_detections(rng, int(rng.integers(1, 40)))
            threshold = float(rng.uniform(0.1, 0.9))
            assert nms(dets, threshold) == _oracle_nms(dets, threshold)

    def test_objectness_range(self):
        with pytest.raises(ValueError):
            Detection(BBox(0, 0, 1, 1), 1.5)


class TestMerging:
    """Test merging text lines into logical blocks."""

    def test_merges_stacked_lines(self):
        first = Detection(BBox(10, 10, 50, 20), 0.6)
        second = Detection(BBox(12, 22, 48, 32), 0.9)
        far = Detection(BBox(100, 100, 120, 110), 0.4)
        merged = merge_logical_blocks([first, second, far], 0.5)
        assert len(merged) == 2
        assert merged[0].box.as_list() == [10, 10, 50, 32]
        assert merged[0].objectness == 0.9
        assert merged[1] == far

    def test_transitive_and_stable(self):
        lines = [Detection(BBox(0, 12 * i, 40, 12 * i + 10), 0.5) for i in range(3)]
        merged = merge_logical_blocks(lines, 0.5)
        assert len(merged) == 1
        assert merged[0].box.as_list() == [0, 0, 40, 34]
        assert merge_logical_blocks(merged, 0.5) == merged

    def test_no_merge_when_side_by_side(self):
        left = Detection(BBox(0, 0, 10, 10), 0.5)
        right = Detection(BBox(40, 0, 50, 10), 0.5)
        assert merge_logical_blocks([left, right], 0.5) == [left, right]

    def test_wide_gap_kept_apart(self):
        top = Detection(BBox(0, 0, 40, 10), 0.5)
        bottom = Detection(BBox(0, 20, 40, 30), 0.5)
        assert len(merge_logical_blocks([top, bottom], 0.5)) == 2


class TestAnchors:
    """Test anchor clustering."""

    def test_structure_and_order(self):
        rng = np.random.default_rng(0)
        centers = np.array([[10, 5], [30, 10], [60, 12], [100, 16]], dtype=float)
        sizes = np.concatenate([c + rng.normal(0, 0.5, size=(25, 2)) for c in centers])
        anchors = kmeans_anchors(sizes, num_scales=2, anchors_per_scale=2, seed=1)
        assert len(anchors) == 2
        assert all(len(scale) == 2 for scale in anchors)
        areas = [w * h for scale in anchors for w, h in scale]
        assert areas == sorted(areas)
        assert kmeans_anchors(sizes, 2, 2, seed=1) == anchors

    def test_too_few_sizes(self):
        with pytest.raises(DataError):
            kmeans_anchors(np.array([[10, 5], [10, 5], [20, 6]]), 2, 2)


class TestTraining:
    """Test target assignment, the loss and the training loop."""

    def test_assign_targets(self, tiny_detector):
        targets = assign_targets([BBox(20, 20, 32, 26)], tiny_detector)
        objectness, boxes = targets[0]
        assert float(objectness.sum()) == 1.0
        assert objectness[2, 3, 0] == 1.0
        assert boxes[2, 3, 0].tolist() == [20.0, 20.0, 32.0, 26.0]

    def test_loss_at_zero_head(self, tiny_detector):
        targets = assign_targets([BBox(20, 20, 32, 26)], tiny_detector)
        targets = [(obj.unsqueeze(0), box.unsqueeze(0)) for obj, box in targets]
        total, box_loss, objectness_loss = detection_loss([torch.zeros(1, 8, 8, 2, 5)], targets, tiny_detector)
        assert float(objectness_loss) == pytest.approx(math.log(2.0), rel=1e-5)
        assert float(box_loss) == pytest.approx(1.0 - 30.0 / 114.0, rel=1e-5)
        assert float(total) == pytest.approx(float(box_loss) + float(objectness_loss))

    def test_requires_blocks(self, tiny_detector):
        blank = LabeledImage(np.ones((64, 64, 3), dtype=np.float32))
        with pytest.raises(DataError):
            train_detector([blank], tiny_detector, TrainSchedule(steps=1))

    def test_short_run(self, tiny_detector, small_spec):
        images = generate_synthetic(small_spec)
        model, curve = train_detector(images[:2], tiny_detector, TrainSchedule(steps=2, batch_size=2))
        assert len(curve.losses) == 2
        assert set(curve.components) == {'box', 'objectness'}
        assert not model.training

    @pytest.mark.slow
    def test_loss_falls_on_synthetic_charts(self, small_spec):
        images = generate_synthetic(small_spec)
        _, curve = train_detector(images, DetectorConfig(), TrainSchedule(steps=300, batch_size=4))
        assert np.mean(curve.losses[-20:]) < np.mean(curve.losses[:20])


class TestInference:
    """Test detect() and its pipeline adapter."""

    def setup_method(self):
        """Set up test fixtures."""
        self.pixels = np.ones((50, 70, 3), dtype=np.float32)

    def test_high_threshold_finds_nothing(self, tiny_detector):
        model = GridDetector(tiny_detector)
        assert detect(self.pixels, model, threshold=0.6) == []

    def test_detections_inside_image(self, tiny_detector):
        model = GridDetector(tiny_detector)
        found = detect(self.pixels, model)
        assert found
        assert all(d.box.within(70, 50) for d in found)

    def test_adapter(self, tiny_detector):
        model = GridDetector(tiny_detector)
        found = GridTextDetector(model).detect(self.pixels, StageContext())
        assert found == detect(self.pixels, model)
