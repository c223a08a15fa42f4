"""
to_json.py - Write extraction results as versioned JSON
"""

import json
import logging

logger = logging.getLogger(__name__)


def dumps(results, include_timings=True, summary=None):
    """
    Serialize one ExtractionResult, or a list of them, as JSON text.

    Args:
        results: ExtractionResult or list of ExtractionResult
        include_timings: Keep per-stage timings (drop them for reproducible output)
        summary: Optional batch summary dictionary stored next to a list of results

    Returns:
        JSON string
    """
    if isinstance(results, (list, tuple)):
        payload = {'results': [r.to_dict(include_timings) for r in results]}
        if summary is not None:
            payload['summary'] = summary
    else:
        payload = results.to_dict(include_timings)
    return json.dumps(payload, indent=2, ensure_ascii=False)


def convert(results, output_file, include_timings=True, summary=None):
    """
    Write extraction results to a JSON file.

    Args:
        results: ExtractionResult or list of ExtractionResult
        output_file: Path to the JSON output file
        include_timings: Keep per-stage timings
        summary: Optional batch summary dictionary
    """
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write(dumps(results, include_timings, summary))
        f.write('\n')
    logger.info("Wrote JSON results to %s", output_file)


def write_report(report, output_file):
    """Write an evaluation report dictionary as JSON."""
    with open(output_file, 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)
        f.write('\n')
