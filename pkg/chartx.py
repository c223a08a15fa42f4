#!/usr/bin/env python3
"""
chartx.py - Command-line interface for chart information extraction

Trains the five stages, extracts structured text from chart images,
evaluates each stage on its own and generates synthetic training charts.

Usage:
    python chartx.py synth data/synth --count 500
    python chartx.py train chart-type --data data/synth --bundle model.zip
    python chartx.py extract chart.png result.json --bundle model.zip
    python chartx.py evaluate recognition --data data/synth --bundle model.zip --ablate-sr
"""

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, replace

from extraction import __version__
from extraction.bundle import PipelineBundle, RunManifest, bundle_key, describe_bundle, load_bundle, save_bundle
from extraction.common import fingerprint, load_image
from extraction.config import ConfigSet, load_config
from extraction.core.pipeline import ExtractionPipeline, batch_extract
from extraction.core.vocab import ChartType
from extraction.data.annotations import load_annotations, load_labeled
from extraction.data.crops import role_crop_dataset, sr_patch_pairs, text_crop_dataset
from extraction.data.splits import stratified_split
from extraction.data.synthetic import generate_synthetic, write_synthetic
from extraction.errors import BundleError, DataError, ExtractionError, UsageError
from extraction.evaluation import (evaluate_chart_type, evaluate_detection, evaluate_recognition,
                                   evaluate_text_role)
from extraction.metrics import REFERENCE_TARGETS
from extraction.models.backbone import train_classifier
from extraction.models.detector import kmeans_anchors, train_detector
from extraction.models.recognizer import recognizer_feature_net, train_recognizer
from extraction.models.training import set_progress
from extraction.models.upscaler import train_sr
from extraction.writers import to_csv, to_html, to_json, to_text

STAGES = ('chart-type', 'detector', 'sr', 'recognizer', 'text-role')
EVALUATIONS = ('chart-type', 'detection', 'text-role', 'recognition')


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(1)


def _size(text):
    try:
        height, width = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return height, width


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(',') if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    parser = ArgumentParser(
        description='Chart information extraction: chart type, text detection, '
                    'super-resolution, recognition and text-role classification',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  python chartx.py synth data/synth --count 500 --seed 7
  python chartx.py train detector --data data/synth --bundle model.zip
  python chartx.py train text-role --data data/synth --bundle model.zip --chart-type line
  python chartx.py extract chart.png chart.html --bundle model.zip --outscale 1.5
  python chartx.py batch-extract charts/ results.json --bundle model.zip --parallelism 4
  python chartx.py evaluate detection --data data/synth --bundle model.zip
  python chartx.py inspect-bundle model.zip
        '''
    )
    parser.add_argument('--seed', type=int, default=0, help='Seed for splits, generation and training (default: 0)')
    parser.add_argument('--config', help='INI config file with stage settings')
    parser.add_argument('--outscale', type=float, default=1.5,
                        help='Upscaling factor for text crops; 1 disables upscaling (default: 1.5)')
    parser.add_argument('--verbose', '-v', action='store_true', help='Log debug messages')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    synth = commands.add_parser('synth', help='Generate synthetic charts with exact annotations')
    synth.add_argument('output', help='Output directory for PNG + JSON pairs')
    synth.add_argument('--count', type=int, help='Number of charts')
    synth.add_argument('--types', help='Comma-separated chart types (default: all four drawable types)')
    synth.add_argument('--image-size', type=_size, help='Image size as HxW')

    train = commands.add_parser('train', help='Train one stage and store it in a bundle')
    train.add_argument('stage', choices=STAGES)
    train.add_argument('--data', required=True, help='Annotation directory')
    train.add_argument('--bundle', required=True, help='Bundle to create or update')
    train.add_argument('--chart-type', help='Train a per-type detector or role model on this chart type only')
    train.add_argument('--ratio', type=float, default=0.8, help='Train fraction of the split (default: 0.8)')
    train.add_argument('--all', action='store_true', help='Train on every record instead of the train split')
    train.add_argument('--steps', type=int, help='Override the number of optimizer steps')
    train.add_argument('--kmeans-anchors', action='store_true', help='Fit detector anchors to the training boxes')
    train.add_argument('--curve-out', help='Write the training curve as CSV')
    train.add_argument('--progress', action='store_true', help='Show progress bars')

    extract = commands.add_parser('extract', help='Extract one chart image')
    extract.add_argument('input', help='Input image (PNG or JPEG)')
    extract.add_argument('output', help='Output file (.json, .txt, .csv or .html)')
    extract.add_argument('--bundle', required=True, help='Trained bundle')

    batch = commands.add_parser('batch-extract', help='Extract every image in a directory')
    batch.add_argument('input', help='Directory of images')
    batch.add_argument('output', help='Output file (.json, .txt, .csv or .html)')
    batch.add_argument('--bundle', required=True, help='Trained bundle')
    batch.add_argument('--parallelism', type=int, default=1, help='Worker threads (default: 1)')

    evaluate = commands.add_parser('evaluate', help='Evaluate one stage on the test split')
    evaluate.add_argument('kind', choices=EVALUATIONS)
    evaluate.add_argument('--data', required=True, help='Annotation directory')
    evaluate.add_argument('--bundle', required=True, help='Trained bundle')
    evaluate.add_argument('--ratio', type=float, default=0.8, help='Train fraction of the split (default: 0.8)')
    evaluate.add_argument('--all', action='store_true', help='Evaluate on every record instead of the test split')
    evaluate.add_argument('--output', help='Write the report (.json or .html)')
    evaluate.add_argument('--ablate-sr', action='store_true',
                          help='Recognition: compare no upscaling with each --outscales setting')
    evaluate.add_argument('--outscales', type=_floats, default=(1.5, 3.0),
                          help='Recognition: comma-separated outscales (default: 1.5,3.0)')
    evaluate.add_argument('--pr-out', help='Text role: write per-role PR curves as CSV')
    evaluate.add_argument('--rows-out', help='Recognition: write the per-setting accuracy table as CSV')

    inspect = commands.add_parser('inspect-bundle', help='Show versions, models and training runs of a bundle')
    inspect.add_argument('bundle', help='Bundle file')
    return parser


def _split_records(args):
    """(train, held-out) records; with --all both are every record."""
    records = load_annotations(args.data)
    if not records:
        raise DataError(f"no annotations found in {args.data}")
    if args.all:
        return list(records), list(records)
    split = stratified_split(records, args.ratio, args.seed)
    return list(split.train), list(split.test)


def _labeled(records):
    return [load_labeled(record) for record in records]


def _open_bundle(path):
    return load_bundle(path) if os.path.exists(path) else PipelineBundle()


def cmd_synth(args, config: ConfigSet):
    spec = config.synthetic.with_seed(args.seed)
    updates = {}
    if args.count is not None:
        updates['count'] = args.count
    if args.types:
        updates['chart_types'] = tuple(ChartType.from_label(t) for t in args.types.split(','))
    if args.image_size:
        updates['image_size'] = args.image_size
    if updates:
        spec = replace(spec, **updates)
    paths = write_synthetic(generate_synthetic(spec), args.output)
    print(f"Synthesis complete: {args.output} ({len(paths)} charts)")


def cmd_train(args, config: ConfigSet):
    set_progress(args.progress)
    key = bundle_key(args.chart_type)
    if key != 'shared' and args.stage not in ('detector', 'text-role'):
        raise UsageError("--chart-type applies to the detector and text-role stages only")

    started = time.perf_counter()
    records, held_out = _split_records(args)
    if key != 'shared':
        records = [r for r in records if r.chart_type.label == key]
        if not records:
            raise DataError(f"no training records of chart type {key}")
    images = _labeled(records)
    loaded = time.perf_counter()

    schedule = config.schedule(args.stage, args.seed)
    if args.steps is not None:
        schedule = schedule.with_steps(args.steps)
    bundle = _open_bundle(args.bundle)
    stage_config, samples = None, len(images)

    if args.stage == 'chart-type':
        stage_config = config.chart_type
        validation = None
        if held_out and not args.all:
            held_out = _labeled(held_out)
            validation = ([i.pixels for i in held_out], [int(i.chart_type) for i in held_out])
        model, curve = train_classifier([i.pixels for i in images], [int(i.chart_type) for i in images],
                                        stage_config, schedule, validation, stage='chart-type')
        bundle.chart_type = model

    elif args.stage == 'detector':
        stage_config = config.detector
        if args.kmeans_anchors:
            sy = stage_config.input_size[0]
            sizes = [(b.box.width * stage_config.input_size[1] / i.width, b.box.height * sy / i.height)
                     for i in images for b in i.blocks]
            stage_config = stage_config.with_anchors(kmeans_anchors(
                sizes, len(stage_config.grid_sizes), stage_config.anchors_per_scale, args.seed))
        model, curve = train_detector(images, stage_config, schedule)
        bundle.detectors[key] = model

    elif args.stage == 'recognizer':
        stage_config = config.recognizer
        crops, transcripts, _ = text_crop_dataset(images, max_length=stage_config.max_length)
        samples = len(crops)
        model, curve = train_recognizer(crops, transcripts, stage_config, schedule)
        bundle.recognizer = model

    elif args.stage == 'sr':
        stage_config = config.upscaler
        crops, _, _ = text_crop_dataset(images)
        pairs = sr_patch_pairs(crops, stage_config.native_scale)
        samples = len(pairs)
        feature_net = recognizer_feature_net(bundle.recognizer) if bundle.recognizer is not None else None
        if feature_net is None:
            logging.getLogger(__name__).warning("No recognizer in %s; perceptual loss disabled", args.bundle)
        model, _, curve = train_sr(pairs, stage_config, schedule, feature_net)
        bundle.upscaler = model

    else:
        stage_config = config.text_role
        samples_and_roles, stats = role_crop_dataset(images)
        samples = len(samples_and_roles)
        print(f"Role crops: {stats.to_dict()['per_role']}")
        model, curve = train_classifier([c for c, _ in samples_and_roles], [int(r) for _, r in samples_and_roles],
                                        stage_config, schedule, stage='text-role')
        bundle.text_roles[key] = model

    finished = time.perf_counter()
    bundle.runs.append(RunManifest(
        stage=args.stage, seed=args.seed, config=asdict(stage_config), schedule=asdict(schedule),
        dataset_fingerprint=fingerprint(images), samples=samples,
        timings={'load': loaded - started, 'train': finished - loaded},
        final_loss=curve.losses[-1] if curve.losses else None, key=key,
    ))
    save_bundle(bundle, args.bundle)
    if args.curve_out:
        to_csv.write_curve(curve, args.curve_out)
        if curve.train_accuracy:
            root, ext = os.path.splitext(args.curve_out)
            to_csv.write_curve(curve, f'{root}.epochs{ext}', epochs=True)
    print(f"Training complete: {args.bundle} ({args.stage}, {samples} samples)")


OUTPUT_EXTENSIONS = ('.json', '.txt', '.csv', '.html', '.htm')


def _check_output(output):
    if os.path.splitext(output)[1].lower() not in OUTPUT_EXTENSIONS:
        raise UsageError("output file must have .json, .txt, .csv or .html extension")


def _write_results(results, output, images=None, summary=None):
    ext = os.path.splitext(output)[1].lower()
    if ext == '.json':
        to_json.convert(results, output, summary=summary)
    elif ext == '.txt':
        to_text.convert(results, output)
    elif ext == '.csv':
        to_csv.convert(results, output)
    elif ext in ('.html', '.htm'):
        to_html.convert(results, output, images=images)
    else:
        raise UsageError("output file must have .json, .txt, .csv or .html extension")


def cmd_extract(args, config: ConfigSet):
    _check_output(args.output)
    pixels = load_image(args.input)
    pipeline = ExtractionPipeline.from_bundle(load_bundle(args.bundle), args.outscale)
    result = pipeline.run(pixels, args.input)
    _write_results(result, args.output, images=[pixels])
    print(f"Extraction complete: {args.output} ({result.chart_type.label}, {len(result.blocks)} blocks)")


def cmd_batch_extract(args, config: ConfigSet):
    _check_output(args.output)
    if not os.path.isdir(args.input):
        raise DataError(f"input directory not found: {args.input}")
    if args.parallelism < 1:
        raise UsageError("--parallelism must be at least 1")
    pipeline = ExtractionPipeline.from_bundle(load_bundle(args.bundle), args.outscale)
    summary = batch_extract(args.input, pipeline, args.parallelism)
    _write_results(summary.results, args.output, summary=summary.to_dict())
    print(f"Batch extraction complete: {args.output} "
          f"({len(summary.results)} succeeded, {len(summary.failures)} failed)")


def _report_tables(kind, report):
    """Evaluation report as (heading, header, rows) tables."""
    if kind == 'detection':
        rows = [[t, v, report['images'][t], report['reference_map50'].get(t)] for t, v in report['map50'].items()]
        rows.append(['pooled', report['pooled_map50'], sum(report['images'].values()), None])
        return [('Detection mAP50', ['chart type', 'mAP50', 'images', 'reference'], rows)]
    if kind == 'recognition':
        rows = [[r['setting'], r['exact_match'], r['edit_distance'], r['count']] for r in report['rows']]
        return [('Recognition', ['setting', 'exact match', 'edit distance', 'crops'], rows)]
    class_reports = {'all': report} if kind == 'chart-type' else dict(report['per_type'], pooled=report['pooled'])
    tables = []
    summary = []
    for name, r in class_reports.items():
        summary.append([name, r['accuracy'], r['macro']['precision'], r['macro']['recall'], r['macro']['f1']])
        rows = [[c, v['precision'], v['recall'], v['f1'], v['support']]
                for c, v in r['classes'].items() if c not in r['absent']]
        tables.append((f'{kind} per class ({name})', ['class', 'precision', 'recall', 'f1', 'support'], rows))
    header = ['set', 'accuracy', 'macro precision', 'macro recall', 'macro f1']
    return [(f'{kind} summary', header, summary)] + tables


def cmd_evaluate(args, config: ConfigSet):
    bundle = load_bundle(args.bundle)
    _, held_out = _split_records(args)
    if not held_out:
        raise DataError(f"the test split of {args.data} is empty")
    images = _labeled(held_out)
    kind = args.kind

    if kind == 'chart-type':
        if bundle.chart_type is None:
            raise _missing('chart_type')
        report = evaluate_chart_type(bundle.chart_type, images)
    elif kind == 'detection':
        if not bundle.detectors:
            raise _missing('detector')
        report = evaluate_detection(bundle.detectors, images).to_dict()
    elif kind == 'text-role':
        if not bundle.text_roles:
            raise _missing('text_role')
        role_report = evaluate_text_role(bundle.text_roles, images)
        report = role_report.to_dict()
        if args.pr_out:
            to_csv.write_pr_curves(role_report.pr_curves, args.pr_out)
    else:
        if bundle.recognizer is None:
            raise _missing('recognizer')
        if args.ablate_sr and bundle.upscaler is None:
            raise _missing('upscaler')
        crops, transcripts, _ = text_crop_dataset(images, max_length=bundle.recognizer.config.max_length)
        outscales = args.outscales if args.ablate_sr else (args.outscale,)
        generator = bundle.upscaler if (args.ablate_sr or args.outscale != 1.0) else None
        rows = evaluate_recognition(bundle.recognizer, crops, transcripts, generator, outscales, args.ablate_sr)
        report = {'rows': [{'setting': r.setting, 'outscale': r.outscale, 'exact_match': r.exact_match,
                            'edit_distance': r.edit_distance, 'count': r.count} for r in rows]}
        if args.rows_out:
            to_csv.write_recognition_rows(rows, args.rows_out)

    tables = _report_tables(kind, report)
    for heading, header, rows in tables:
        print(heading)
        print('\n'.join(to_text.table_lines(header, rows, indent='  ')))
        print()
    if kind == 'chart-type':
        print(f"Reference macro F1 at full scale: {REFERENCE_TARGETS['chart_type_f1']:.3f}")

    if args.output:
        if args.output.lower().endswith(('.html', '.htm')):
            to_html.convert_report(f'Evaluation: {kind}', tables, args.output)
        else:
            to_json.write_report(report, args.output)
        print(f"Evaluation complete: {args.output}")


def _missing(stage):
    return BundleError(f"bundle has no {stage} model")


def cmd_inspect_bundle(args, config: ConfigSet):
    info = describe_bundle(args.bundle)
    print(f"Bundle: {args.bundle}")
    print(f"Format version: {info['format_version']} (library {info['library_version']})")
    charset = info['charset']
    print(f"Charset: {charset!r}" if charset is not None else "Charset: (no recognizer)")
    rows = [[name, m['parameters'], m['sha256'][:12]] for name, m in info['models'].items()]
    print('\n'.join(to_text.table_lines(['model', 'parameters', 'sha256'], rows, indent='  ')))
    if info['missing']:
        print(f"Missing stages: {', '.join(info['missing'])}")
    runs = [[r['stage'], r['key'], r['seed'], r['samples'], r['final_loss'] if r['final_loss'] is not None else '',
             r['dataset_fingerprint'][:12]] for r in info['runs']]
    if runs:
        print('Training runs:')
        print('\n'.join(to_text.table_lines(['stage', 'key', 'seed', 'samples', 'final loss', 'data'],
                                            runs, indent='  ')))


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'extract': cmd_extract,
    'batch-extract': cmd_batch_extract,
    'evaluate': cmd_evaluate,
    'inspect-bundle': cmd_inspect_bundle,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')

    try:
        config = load_config(args.config) if args.config else ConfigSet()
        if args.outscale <= 0:
            raise UsageError(f"--outscale must be positive, got {args.outscale}")
        COMMANDS[args.command](args, config)
    except ExtractionError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(f"Error during {args.command}: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
