"""
Unit tests for dataset handling.

Tests annotation loading, stratified splits, the synthetic generator and
crop building.
"""

import json
import os

import numpy as np
import pytest

from extraction.common import fingerprint, save_image
from extraction.config import SyntheticSpec
from extraction.core.geometry import BBox
from extraction.core.records import AnnotationRecord, LabeledImage, TextBlock
from extraction.core.vocab import ChartType, SYNTHETIC_CHART_TYPES, TextRole
from extraction.data.annotations import (convert_chartinfo, load_annotation_file, load_annotations,
                                         load_labeled, parse_annotation, save_annotation, scan_annotations)
from extraction.data.crops import block_crops, role_crop_dataset, sr_patch_pairs, text_crop_dataset
from extraction.data.splits import stratified_split
from extraction.data.synthetic import generate_chart, generate_synthetic, render_span, write_synthetic
from extraction.errors import AnnotationError, DataError, LayoutError, UsageError


def _write_chart(folder, stem, payload, size=(20, 30)):
    save_image(np.ones(size + (3,), dtype=np.float32), os.path.join(folder, stem + '.png'))
    with open(os.path.join(folder, stem + '.json'), 'w', encoding='utf-8') as f:
        json.dump(payload, f)


def _records(counts):
    records = []
    for chart_type, n in counts.items():
        records.extend(AnnotationRecord(f'{chart_type.label}-{i:03d}.png', chart_type) for i in range(n))
    return records


CHART_INFO = {
    'task1': {'output': {'chart_type': 'vertical bar'}},
    'task2': {'output': {'text_blocks': [
        {'id': 0, 'text': 'Sales', 'polygon': {'x0': 2, 'y0': 1, 'x1': 12, 'y1': 1,
                                              'x2': 12, 'y2': 5, 'x3': 2, 'y3': 5}},
        {'id': 1, 'text': '10', 'bb': {'x0': 1, 'y0': 10, 'width': 4, 'height': 3}},
    ]}},
    'task3': {'output': {'text_roles': [{'id': 0, 'role': 'chart_title'}, {'id': 1, 'role': 'tick_label'}]}},
}


class TestAnnotations:
    """Test annotation parsing and loading."""

    def test_parse_local_schema(self):
        record = parse_annotation({'chart_type': 'line', 'blocks': [
            {'box': [1, 2, 10, 8], 'role': 'axis-title', 'text': 'Year'}]}, 'a.png')
        assert record.chart_type is ChartType.LINE
        assert record.blocks[0].role is TextRole.AXIS_TITLE
        assert record.blocks[0].transcript == 'Year'
        assert record.source_id == 'a.png'

    def test_unknown_role(self):
        with pytest.raises(AnnotationError, match='caption'):
            parse_annotation({'chart_type': 'line', 'blocks': [
                {'box': [1, 2, 10, 8], 'role': 'caption', 'text': 'x'}]}, 'a.png')

    def test_missing_field(self):
        with pytest.raises(AnnotationError, match='lacks'):
            parse_annotation({'chart_type': 'line', 'blocks': [{'box': [1, 2, 10, 8], 'role': 'other'}]}, 'a.png')
        with pytest.raises(AnnotationError):
            parse_annotation({'blocks': []}, 'a.png')

    def test_convert_chartinfo(self):
        payload = convert_chartinfo(CHART_INFO)
        assert payload['chart_type'] == 'vertical bar'
        assert payload['blocks'][0] == {'box': [2.0, 1.0, 12.0, 5.0], 'role': 'chart_title', 'text': 'Sales'}
        assert payload['blocks'][1]['box'] == [1.0, 10.0, 5.0, 13.0]
        record = parse_annotation(CHART_INFO, 'c.png')
        assert record.chart_type is ChartType.VERTICAL_BAR
        assert [b.role for b in record.blocks] == [TextRole.CHART_TITLE, TextRole.TICK_LABEL]

    def test_chartinfo_missing_role(self):
        broken = json.loads(json.dumps(CHART_INFO))
        broken['task3']['output']['text_roles'] = broken['task3']['output']['text_roles'][:1]
        with pytest.raises(AnnotationError, match='has no role'):
            convert_chartinfo(broken)

    def test_load_file_finds_image(self, tmp_path):
        _write_chart(str(tmp_path), 'c1', {'chart_type': 'scatter', 'blocks': []})
        record = load_annotation_file(str(tmp_path / 'c1.json'))
        assert record.image_path == str(tmp_path / 'c1.png')

    def test_load_file_errors_carry_path(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{not json', encoding='utf-8')
        with pytest.raises(AnnotationError) as info:
            load_annotation_file(str(path))
        assert info.value.path == str(path)
        assert str(path) in str(info.value)

    @pytest.mark.parametrize('box', [[0, 0, 'x', 4], None, [1, 2]])
    def test_malformed_box_is_rejected(self, tmp_path, box):
        _write_chart(str(tmp_path), 'broken', {'chart_type': 'line', 'blocks': [
            {'box': box, 'role': 'other', 'text': 'x'}]})
        with pytest.raises(AnnotationError) as info:
            load_annotation_file(str(tmp_path / 'broken.json'))
        assert info.value.path == str(tmp_path / 'broken.json')
        with pytest.raises(AnnotationError, match='1 annotation files rejected'):
            load_annotations(str(tmp_path))

    @pytest.mark.parametrize('edit', [
        lambda p: p['task3']['output']['text_roles'].append({'role': 'other'}),
        lambda p: p['task3']['output'].update(text_roles=[0, 1]),
        lambda p: p['task2']['output']['text_blocks'].append('Sales'),
        lambda p: p['task2']['output']['text_blocks'][1]['bb'].pop('width'),
        lambda p: p['task2']['output']['text_blocks'][0]['polygon'].update(x1='wide'),
        lambda p: p['task2']['output'].update(text_blocks=7),
    ])
    def test_malformed_chartinfo_is_rejected(self, edit):
        broken = json.loads(json.dumps(CHART_INFO))
        edit(broken)
        with pytest.raises(AnnotationError):
            convert_chartinfo(broken)

    def test_malformed_block_list(self):
        with pytest.raises(AnnotationError, match='must be a list'):
            parse_annotation({'chart_type': 'line', 'blocks': {'box': [0, 0, 1, 1]}}, 'a.png')
        with pytest.raises(AnnotationError, match='must be an object'):
            parse_annotation({'chart_type': 'line', 'blocks': ['Sales']}, 'a.png')

    def test_missing_image(self, tmp_path):
        path = tmp_path / 'lonely.json'
        path.write_text(json.dumps({'chart_type': 'line', 'blocks': []}), encoding='utf-8')
        with pytest.raises(AnnotationError, match='no image file'):
            load_annotation_file(str(path))

    def test_scan_collects_failures(self, tmp_path):
        _write_chart(str(tmp_path), 'good', {'chart_type': 'line', 'blocks': []})
        _write_chart(str(tmp_path), 'bad', {'chart_type': 'radar', 'blocks': []})
        records, failures = scan_annotations(str(tmp_path))
        assert [os.path.basename(r.image_path) for r in records] == ['good.png']
        assert len(failures) == 1
        with pytest.raises(AnnotationError, match='1 annotation files rejected'):
            load_annotations(str(tmp_path))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match='not found'):
            load_annotations(str(tmp_path / 'nowhere'))

    def test_load_labeled_clips_and_drops(self, tmp_path):
        _write_chart(str(tmp_path), 'c', {'chart_type': 'line', 'blocks': [
            {'box': [25, 2, 40, 6], 'role': 'other', 'text': 'edge'},
            {'box': [100, 100, 110, 110], 'role': 'other', 'text': 'gone'}]})
        image = load_labeled(load_annotation_file(str(tmp_path / 'c.json')))
        assert image.pixels.shape == (20, 30, 3)
        assert len(image.blocks) == 1
        assert image.blocks[0].box.as_list() == [25, 2, 30, 6]

    def test_save_and_reload(self, tmp_path):
        item = LabeledImage(np.ones((20, 30, 3), dtype=np.float32), ChartType.SCATTER,
                            [TextBlock(BBox(1, 1, 9, 5), TextRole.LEGEND_LABEL, 'Urban')], 'x')
        save_image(item.pixels, str(tmp_path / 'img.png'))
        save_annotation(item, str(tmp_path / 'ann.json'), image_name='img.png')
        record = load_annotation_file(str(tmp_path / 'ann.json'))
        assert record.chart_type is ChartType.SCATTER
        assert record.blocks == item.blocks


class TestSplits:
    """Test stratified splitting."""

    def test_single_type_ratio(self):
        split = stratified_split(_records({ChartType.LINE: 100}), ratio=0.8, seed=0)
        assert (len(split.train), len(split.test)) == (80, 20)

    def test_two_types(self):
        split = stratified_split(_records({ChartType.LINE: 50, ChartType.SCATTER: 50}), ratio=0.8)
        for chart_type in (ChartType.LINE, ChartType.SCATTER):
            assert sum(r.chart_type is chart_type for r in split.train) == 40
            assert sum(r.chart_type is chart_type for r in split.test) == 10

    def test_disjoint_and_complete(self):
        records = _records({ChartType.LINE: 13, ChartType.PIE: 7, ChartType.AREA: 1})
        split = stratified_split(records, 0.7, seed=3)
        train, test = split.source_ids()
        assert not set(train) & set(test)
        assert sorted(train + test) == sorted(r.source_id for r in records)
        assert 'area-000.png' in train

    def test_deterministic(self):
        records = _records({ChartType.LINE: 30, ChartType.SCATTER: 20})
        assert stratified_split(records, seed=4) == stratified_split(list(reversed(records)), seed=4)
        assert stratified_split(records, seed=4).train != stratified_split(records, seed=5).train

    def test_both_sides_nonempty(self):
        split = stratified_split(_records({ChartType.LINE: 2}), ratio=0.99)
        assert (len(split.train), len(split.test)) == (1, 1)

    def test_bad_ratio(self):
        with pytest.raises(UsageError):
            stratified_split([], ratio=1.0)


class TestSynthetic:
    """Test the synthetic chart generator."""

    def test_round_robin_counts(self):
        images = generate_synthetic(SyntheticSpec(count=100, seed=1))
        counts = {t: sum(image.chart_type is t for image in images) for t in SYNTHETIC_CHART_TYPES}
        assert set(counts.values()) == {25}

    def test_boxes_and_labels(self, small_spec):
        for image in generate_synthetic(small_spec):
            assert image.pixels.shape == (192, 192, 3)
            assert image.pixels.dtype == np.float32
            roles = [block.role for block in image.blocks]
            assert TextRole.CHART_TITLE in roles
            assert roles.count(TextRole.AXIS_TITLE) == 2
            assert roles.count(TextRole.TICK_LABEL) >= 4
            for block in image.blocks:
                assert block.box.within(192, 192)
                assert block.transcript

    def test_deterministic(self, small_spec):
        first, second = generate_synthetic(small_spec), generate_synthetic(small_spec)
        for a, b in zip(first, second):
            assert np.array_equal(a.pixels, b.pixels)
            assert a.blocks == b.blocks
            assert a.source_id == b.source_id
        assert fingerprint(first) == fingerprint(second)
        other = generate_synthetic(small_spec.with_seed(8))
        assert not all(np.array_equal(a.pixels, b.pixels) for a, b in zip(first, other))

    def test_spans_render_pixel_for_pixel(self, small_spec):
        """Test each block re-renders alone to the exact pixels of the chart."""
        for index in range(small_spec.count):
            image, spans = generate_chart(small_spec, index)
            assert len(spans) == len(image.blocks)
            for span, block in zip(spans, image.blocks):
                alone = render_span(span, small_spec.image_size)
                ink_rows, ink_cols = np.nonzero((alone < 1.0).any(axis=2))
                assert len(ink_rows)
                box = block.box.expand(1)
                assert ink_cols.min() >= box.x_min and ink_cols.max() < box.x_max
                assert ink_rows.min() >= box.y_min and ink_rows.max() < box.y_max
                x0, y0, x1, y1 = (int(v) for v in block.box.as_list())
                assert np.array_equal(alone[y0:y1, x0:x1], image.pixels[y0:y1, x0:x1])

    def test_too_small_image(self):
        with pytest.raises(LayoutError, match='layout infeasible'):
            generate_synthetic(SyntheticSpec(count=1, image_size=(40, 40)))

    def test_write_synthetic(self, tmp_path, small_spec):
        images = generate_synthetic(small_spec)[:2]
        paths = write_synthetic(images, str(tmp_path))
        assert [os.path.basename(p) for p in paths] == ['synthetic-7-00000.png', 'synthetic-7-00001.png']
        records = load_annotations(str(tmp_path))
        assert [r.chart_type for r in records] == [images[0].chart_type, images[1].chart_type]
        assert records[0].blocks == tuple(TextBlock(b.box, b.role, b.transcript) for b in images[0].blocks)


class TestCrops:
    """Test crop and patch builders."""

    def setup_method(self):
        """Set up test fixtures."""
        pixels = np.ones((20, 30, 3), dtype=np.float32)
        self.image = LabeledImage(pixels, ChartType.LINE, [
            TextBlock(BBox(2, 2, 12, 8), TextRole.CHART_TITLE, 'Sales'),
            TextBlock(BBox(2, 10, 6, 14), TextRole.TICK_LABEL, '10'),
            TextBlock(BBox(8, 10, 28, 14), TextRole.TICK_LABEL, 'x' * 40),
        ], 'img')

    def test_block_crops(self):
        crops, stats = block_crops([self.image], margin=1.0)
        assert len(crops) == 3
        assert crops[0][0].shape == (8, 12, 3)
        assert crops[0][2] is ChartType.LINE
        assert stats.samples == 3
        assert stats.per_role == {'chart-title': 1, 'tick-label': 2}

    def test_role_dataset(self):
        samples, stats = role_crop_dataset([self.image], margin=0)
        assert [role for _, role in samples] == [TextRole.CHART_TITLE, TextRole.TICK_LABEL, TextRole.TICK_LABEL]
        assert samples[0][0].shape == (6, 10, 3)
        assert stats.to_dict()['per_role'] == {'chart-title': 1, 'tick-label': 2}

    def test_text_dataset_limits_length(self):
        crops, transcripts, _ = text_crop_dataset([self.image], max_length=32)
        assert transcripts == ['Sales', '10']
        assert len(crops) == 2

    def test_skips_are_counted(self, tmp_path):
        save_image(np.ones((20, 30, 3), dtype=np.float32), str(tmp_path / 'a.png'))
        records = [
            AnnotationRecord(str(tmp_path / 'a.png'), ChartType.LINE, (
                TextBlock(BBox(1, 1, 9, 9), TextRole.OTHER, 'in'),
                TextBlock(BBox(500, 500, 510, 510), TextRole.OTHER, 'out'))),
            AnnotationRecord(str(tmp_path / 'missing.png'), ChartType.LINE,
                             (TextBlock(BBox(1, 1, 9, 9), TextRole.OTHER, 'lost'),)),
        ]
        crops, stats = block_crops(records)
        assert len(crops) == 1
        assert (stats.skipped_blocks, stats.skipped_images, stats.skipped) == (1, 1, 2)

    def test_sr_pairs(self):
        crops = [np.zeros((10, 50, 3), dtype=np.float32), np.zeros((12, 6, 3), dtype=np.float32)]
        pairs = sr_patch_pairs(crops, native_scale=2, patch_size=32)
        for low, high in pairs:
            assert low.shape == (16, 16, 3)
            assert high.shape == (32, 32, 3)
        # the narrow crop is padded with white on the right
        assert np.allclose(pairs[1][1][:, -1], 1.0)

    def test_sr_pairs_indivisible(self):
        with pytest.raises(DataError):
            sr_patch_pairs([], native_scale=4, patch_size=30)
