"""
to_text.py - Plain-text rendering of extraction results and report tables
"""

import logging
import textwrap

logger = logging.getLogger(__name__)


def table_lines(header, rows, indent=''):
    """
    Lay out rows as left-aligned columns separated by two spaces.

    Args:
        header: Column titles
        rows: Rows of cells; cells are converted with str()
        indent: Prefix for every line

    Returns:
        List of lines, header first
    """
    cells = [[str(c) for c in header]] + [[_cell(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells if i < len(row)) for i in range(len(header))]
    return [indent + '  '.join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
            for row in cells]


def _cell(value):
    if isinstance(value, float):
        return f'{value:.3f}'
    return str(value)


def result_lines(result, line_width=72):
    """Render one ExtractionResult as text lines."""
    lines = []
    if result.source_id:
        lines.append(result.source_id)
    lines.append(f"Chart type: {result.chart_type.label} ({result.chart_confidence:.3f})")
    lines.append(f"Text blocks: {len(result.blocks)}")
    if result.blocks:
        lines.append('')
        text_width = max(10, line_width - 48)
        rows = []
        for i, block in enumerate(result.blocks):
            box = ','.join(str(int(round(v))) for v in block.box.as_list())
            text = textwrap.shorten(block.transcript or '', width=text_width, placeholder='...') or '-'
            rows.append([i, block.role.label, block.role_confidence or 0.0, box, text])
        lines.extend(table_lines(['#', 'role', 'conf', 'box', 'text'], rows, indent='  '))
    return lines


def convert(results, output_file, line_width=72):
    """
    Write extraction results as plain text.

    Args:
        results: ExtractionResult or list of ExtractionResult
        output_file: Path to text output file
        line_width: Width the transcript column is shortened to fit
    """
    if not isinstance(results, (list, tuple)):
        results = [results]
    output_lines = []
    for result in results:
        if output_lines:
            output_lines.append('')
        output_lines.extend(result_lines(result, line_width))
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write('\n'.join(output_lines))
        if output_lines:
            f.write('\n')
    logger.info("Wrote text results to %s", output_file)
