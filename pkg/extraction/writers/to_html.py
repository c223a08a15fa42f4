"""
to_html.py - HTML pages for extraction results and evaluation reports

Pages are built as lxml element trees and serialized once, so every text
value is escaped by the serializer.
"""

import base64
import io
import logging

import numpy as np
from lxml import etree
from lxml.html import builder as E
from PIL import Image

logger = logging.getLogger(__name__)

STYLE = """
body { font-family: sans-serif; margin: 2em; }
table { border-collapse: collapse; margin-bottom: 1.5em; }
th, td { border: 1px solid #bbb; padding: 2px 8px; text-align: left; }
th { background: #eee; }
img.chart { image-rendering: pixelated; border: 1px solid #ccc; max-width: 100%; }
"""


def _page(title, *body):
    return E.HTML(
        E.HEAD(E.META(charset='utf-8'), E.TITLE(title), E.STYLE(STYLE)),
        E.BODY(E.H1(title), *body),
    )


def _table(header, rows):
    return E.TABLE(
        E.THEAD(E.TR(*[E.TH(str(h)) for h in header])),
        E.TBODY(*[E.TR(*[E.TD(_cell(c)) for c in row]) for row in rows]),
    )


def _cell(value):
    if isinstance(value, float):
        return f'{value:.3f}'
    return '' if value is None else str(value)


def image_data_uri(pixels):
    """PNG data URI for an H x W x 3 array in [0, 1]."""
    array = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format='PNG')
    return 'data:image/png;base64,' + base64.b64encode(buffer.getvalue()).decode('ascii')


def result_section(result, pixels=None):
    """One result as a section: heading, chart type, optional inline image, block table."""
    section = E.DIV(E.CLASS('result'))
    if result.source_id:
        section.append(E.H2(result.source_id))
    section.append(E.P(f"Chart type: {result.chart_type.label} "
                       f"(confidence {result.chart_confidence:.3f})"))
    if pixels is not None:
        section.append(E.IMG(E.CLASS('chart'), src=image_data_uri(pixels), alt=result.chart_type.label))
    rows = [[i, block.role.label, block.role_confidence or 0.0, block.transcript, block.confidence,
             ', '.join(f'{v:.1f}' for v in block.box.as_list())]
            for i, block in enumerate(result.blocks)]
    section.append(_table(['#', 'role', 'role conf', 'text', 'text conf', 'box'], rows))
    return section


def tostring(page):
    return etree.tostring(page, method='html', pretty_print=True, encoding='unicode',
                          doctype='<!DOCTYPE html>')


def convert(results, output_file, images=None, title='Chart extraction'):
    """
    Write extraction results as an HTML page.

    Args:
        results: ExtractionResult or list of ExtractionResult
        output_file: Path to HTML output file
        images: Optional pixel arrays, one per result, shown inline
        title: Page title
    """
    if not isinstance(results, (list, tuple)):
        results = [results]
    images = list(images) if images is not None else [None] * len(results)
    page = _page(title, *[result_section(r, px) for r, px in zip(results, images)])
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write(tostring(page))
    logger.info("Wrote HTML results to %s", output_file)


def convert_report(title, tables, output_file):
    """
    Write an evaluation report as HTML tables.

    Args:
        title: Page title
        tables: (heading, header, rows) triples
        output_file: Path to HTML output file
    """
    body = []
    for heading, header, rows in tables:
        body.append(E.H2(heading))
        body.append(_table(header, rows))
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write(tostring(_page(title, *body)))
    logger.info("Wrote HTML report to %s", output_file)
