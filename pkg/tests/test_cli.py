"""
Unit tests for the chartx command-line interface.

Tests exit codes, synthesis, training into a bundle, bundle inspection and
an end-to-end run of every stage at toy scale.
"""

import json
import os
import zipfile

import pytest

import chartx
from extraction.bundle import PipelineBundle, load_bundle, save_bundle
from extraction.models.recognizer import TextRecognizer

TINY_CONFIG = """
[chart_type]
input_size = 32x32
embed_dim = 8
depths = 2,2,2,2
heads = 1,1,2,2

[text_role]
input_size = 32x32
embed_dim = 8
depths = 2,2,2,2
heads = 1,1,2,2
num_classes = 9

[detector]
input_size = 64x64
grid_sizes = 8
anchors = 12:6 24:8
channels = 8

[upscaler]
num_rrdb_blocks = 1
growth_channels = 4
base_channels = 8
discriminator_channels = 4

[recognizer]
max_length = 12
num_fiducial = 6
image_size = 16x32
hidden_size = 16
channels = 4,8,8

[train]
steps = 2
batch_size = 2

[train.sr]
pretrain_steps = 1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'tiny.ini'
    path.write_text(TINY_CONFIG, encoding='utf-8')
    return str(path)


@pytest.fixture
def synth_dir(tmp_path):
    output = tmp_path / 'synth'
    assert chartx.main(['--seed', '3', 'synth', str(output), '--count', '4']) == 0
    return str(output)


class TestUsage:
    """Test argument handling and exit codes."""

    def test_unknown_command(self, capsys):
        with pytest.raises(SystemExit) as info:
            chartx.main(['frobnicate'])
        assert info.value.code == 1
        assert 'Error:' in capsys.readouterr().err

    def test_bad_size(self):
        with pytest.raises(SystemExit) as info:
            chartx.main(['synth', 'out', '--image-size', 'big'])
        assert info.value.code == 1

    def test_bad_output_extension(self, tmp_path, capsys):
        code = chartx.main(['extract', 'chart.png', str(tmp_path / 'out.xml'), '--bundle', 'none.zip'])
        assert code == 1
        assert '.json, .txt, .csv or .html' in capsys.readouterr().err

    def test_bad_outscale(self, tmp_path):
        assert chartx.main(['--outscale', '0', 'inspect-bundle', 'x.zip']) == 1

    def test_bad_config(self, tmp_path):
        path = tmp_path / 'bad.ini'
        path.write_text('[detector]\ncolour = red\n', encoding='utf-8')
        assert chartx.main(['--config', str(path), 'inspect-bundle', 'x.zip']) == 1

    def test_missing_image(self, tmp_path):
        code = chartx.main(['extract', str(tmp_path / 'none.png'), str(tmp_path / 'out.json'),
                            '--bundle', 'none.zip'])
        assert code == 2

    def test_missing_bundle(self, tmp_path, capsys):
        assert chartx.main(['inspect-bundle', str(tmp_path / 'none.zip')]) == 3
        assert 'bundle not found' in capsys.readouterr().err

    def test_empty_data(self, tmp_path):
        code = chartx.main(['train', 'chart-type', '--data', str(tmp_path), '--bundle', str(tmp_path / 'b.zip')])
        assert code == 2

    def test_chart_type_for_wrong_stage(self, tmp_path, synth_dir):
        code = chartx.main(['train', 'sr', '--data', synth_dir, '--bundle', str(tmp_path / 'b.zip'),
                            '--chart-type', 'line'])
        assert code == 1


class TestCommands:
    """Test the individual subcommands."""

    def test_synth(self, synth_dir, capsys):
        names = sorted(os.listdir(synth_dir))
        assert len(names) == 8
        assert names[0] == 'synthetic-3-00000.json'
        with open(os.path.join(synth_dir, names[0]), encoding='utf-8') as f:
            assert json.load(f)['chart_type'] in ('horizontal-bar', 'vertical-bar', 'line', 'scatter')

    def test_synth_types(self, tmp_path):
        output = tmp_path / 'lines'
        assert chartx.main(['synth', str(output), '--count', '2', '--types', 'line']) == 0
        for name in os.listdir(output):
            if name.endswith('.json'):
                assert json.loads((output / name).read_text(encoding='utf-8'))['chart_type'] == 'line'

    def test_train_and_inspect(self, tmp_path, synth_dir, config_file, capsys):
        bundle = str(tmp_path / 'model.zip')
        curve = str(tmp_path / 'curve.csv')
        code = chartx.main(['--config', config_file, 'train', 'chart-type', '--data', synth_dir,
                            '--bundle', bundle, '--all', '--curve-out', curve])
        assert code == 0
        assert os.path.exists(curve)
        assert os.path.exists(str(tmp_path / 'curve.epochs.csv'))

        loaded = load_bundle(bundle)
        assert loaded.chart_type is not None
        assert loaded.runs[0].stage == 'chart-type'
        assert loaded.runs[0].samples == 4

        capsys.readouterr()
        assert chartx.main(['inspect-bundle', bundle]) == 0
        out = capsys.readouterr().out
        assert 'Charset: (no recognizer)' in out
        assert 'Missing stages: detector, upscaler, recognizer, text_role' in out

    def test_extract_needs_complete_bundle(self, tmp_path, synth_dir, config_file):
        bundle = str(tmp_path / 'model.zip')
        assert chartx.main(['--config', config_file, 'train', 'chart-type', '--data', synth_dir,
                            '--bundle', bundle, '--all']) == 0
        image = os.path.join(synth_dir, 'synthetic-3-00000.png')
        assert chartx.main(['extract', image, str(tmp_path / 'out.json'), '--bundle', bundle]) == 3

    def test_inspect_rejects_unknown_stage(self, tmp_path, tiny_recognizer, capsys):
        bundle = str(tmp_path / 'model.zip')
        save_bundle(PipelineBundle(recognizer=TextRecognizer(tiny_recognizer).eval()), bundle)
        with zipfile.ZipFile(bundle) as archive:
            entries = [(info.filename, archive.read(info.filename)) for info in archive.infolist()]
        with zipfile.ZipFile(bundle, 'w') as archive:
            for name, data in entries:
                if name == 'manifest.json':
                    manifest = json.loads(data)
                    manifest['models']['reader'] = manifest['models'].pop('recognizer')
                    data = json.dumps(manifest)
                archive.writestr(name, data)
        assert chartx.main(['inspect-bundle', bundle]) == 3
        assert "unknown stage 'reader'" in capsys.readouterr().err

    def test_recognition_rows_csv(self, tmp_path, synth_dir, tiny_recognizer):
        bundle = str(tmp_path / 'model.zip')
        save_bundle(PipelineBundle(recognizer=TextRecognizer(tiny_recognizer).eval()), bundle)
        rows_out = tmp_path / 'rows.csv'
        code = chartx.main(['--outscale', '1', 'evaluate', 'recognition', '--data', synth_dir, '--bundle', bundle,
                            '--all', '--rows-out', str(rows_out)])
        assert code == 0
        lines = rows_out.read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'setting,outscale,exact_match,edit_distance,count'
        assert len(lines) == 2
        assert lines[1].startswith('none,1.0,')


@pytest.mark.slow
class TestEndToEnd:
    """Test training every stage and using the result."""

    def test_full_run(self, tmp_path, synth_dir, config_file, capsys):
        bundle = str(tmp_path / 'model.zip')
        base = ['--config', config_file]
        for stage in ('chart-type', 'detector', 'recognizer', 'sr', 'text-role'):
            assert chartx.main(base + ['train', stage, '--data', synth_dir, '--bundle', bundle, '--all']) == 0
        assert chartx.main(base + ['train', 'detector', '--data', synth_dir, '--bundle', bundle, '--all',
                                   '--chart-type', 'line', '--kmeans-anchors']) == 0
        assert load_bundle(bundle).missing() == []

        image = os.path.join(synth_dir, 'synthetic-3-00000.png')
        for ext in ('.json', '.txt', '.csv', '.html'):
            assert chartx.main(base + ['extract', image, str(tmp_path / f'out{ext}'), '--bundle', bundle]) == 0
        result = json.loads((tmp_path / 'out.json').read_text(encoding='utf-8'))
        assert result['source'] == image
        assert set(result['timings']) == {'chart_type', 'detection', 'upscaling', 'recognition', 'text_role'}

        batch = str(tmp_path / 'batch.json')
        assert chartx.main(base + ['batch-extract', synth_dir, batch, '--bundle', bundle,
                                   '--parallelism', '2']) == 0
        with open(batch, encoding='utf-8') as f:
            assert json.load(f)['summary']['succeeded'] == 4

        for kind in ('chart-type', 'detection', 'text-role'):
            report = str(tmp_path / f'{kind}.json')
            assert chartx.main(base + ['evaluate', kind, '--data', synth_dir, '--bundle', bundle, '--all',
                                       '--output', report]) == 0
        report = str(tmp_path / 'recognition.html')
        assert chartx.main(base + ['evaluate', 'recognition', '--data', synth_dir, '--bundle', bundle, '--all',
                                   '--ablate-sr', '--outscales', '2', '--output', report]) == 0
        assert 'sr x2' in (tmp_path / 'recognition.html').read_text(encoding='utf-8')
