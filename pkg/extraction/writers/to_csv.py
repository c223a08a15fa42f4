"""
to_csv.py - CSV output for block tables, training curves, PR curves and ablations
"""

import csv
import logging

logger = logging.getLogger(__name__)

BLOCK_COLUMNS = ['source', 'chart_type', 'chart_confidence', 'block', 'x_min', 'y_min', 'x_max', 'y_max',
                 'role', 'role_confidence', 'text', 'text_confidence']


def _write(output_file, header, rows):
    with open(output_file, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info("Wrote %d CSV rows to %s", len(rows), output_file)


def block_rows(results):
    """One row per block of every result, in BLOCK_COLUMNS order."""
    rows = []
    for result in results:
        for i, block in enumerate(result.blocks):
            rows.append([result.source_id, result.chart_type.label, result.chart_confidence, i,
                         *block.box.as_list(), block.role.label, block.role_confidence,
                         block.transcript, block.confidence])
    return rows


def convert(results, output_file):
    """Write the blocks of one or more ExtractionResults as CSV."""
    if not isinstance(results, (list, tuple)):
        results = [results]
    _write(output_file, BLOCK_COLUMNS, block_rows(results))


def write_curve(curve, output_file, epochs=False):
    """
    Write a TrainingCurve.

    Args:
        curve: TrainingCurve
        output_file: CSV path
        epochs: Write the per-epoch accuracy table instead of per-step losses
    """
    header, rows = curve.epoch_rows() if epochs else curve.rows()
    _write(output_file, header, rows)


def write_pr_curves(curves, output_file):
    """Write {role: [PRPoint, ...]} as role, threshold, precision, recall rows."""
    rows = [[role, p.threshold, p.precision, p.recall]
            for role, points in curves.items() for p in points]
    _write(output_file, ['role', 'threshold', 'precision', 'recall'], rows)


def write_recognition_rows(rows, output_file):
    """Write the upscaling ablation table."""
    _write(output_file, ['setting', 'outscale', 'exact_match', 'edit_distance', 'count'],
           [[r.setting, r.outscale, r.exact_match, r.edit_distance, r.count] for r in rows])
