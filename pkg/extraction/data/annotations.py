"""
Annotation ingestion.

The local schema is one JSON file per image:

    {"chart_type": "line",
     "image": "optional/relative/path.png",
     "blocks": [{"box": [x_min, y_min, x_max, y_max], "role": "tick-label", "text": "10"}]}

Without an "image" key the image is the PNG or JPEG next to the JSON file
with the same stem. Files in the competition layout (task1/task2/task3
sections with polygons) are converted on the fly by convert_chartinfo().
"""

import json
import logging
import os
from typing import List, Tuple

from ..common import IMAGE_EXTENSIONS, load_image
from ..core.geometry import BBox
from ..core.records import AnnotationRecord, LabeledImage, TextBlock
from ..core.vocab import ChartType, TextRole
from ..errors import AnnotationError, DataError, ExtractionError

logger = logging.getLogger(__name__)


def _polygon_box(polygon: dict) -> BBox:
    xs = [float(polygon[k]) for k in sorted(polygon) if k.startswith('x')]
    ys = [float(polygon[k]) for k in sorted(polygon) if k.startswith('y')]
    if not xs or not ys:
        raise AnnotationError(f"polygon without coordinates: {polygon}")
    return BBox(min(xs), min(ys), max(xs), max(ys))


def _block_box(block: dict) -> BBox:
    if 'polygon' in block:
        return _polygon_box(block['polygon'])
    if 'bb' in block:
        bb = block['bb']
        return BBox.from_xywh(bb['x0'], bb['y0'], bb['width'], bb['height'])
    raise AnnotationError(f"text block {block.get('id')} has neither polygon nor bb")


def convert_chartinfo(payload: dict) -> dict:
    """
    Convert a competition annotation into the local schema.

    task1 gives the chart type, task2 the text blocks (polygons or
    x0/y0/width/height boxes) and task3 the role of each block id.

    Args:
        payload: Parsed competition JSON

    Returns:
        Local-schema dictionary

    Raises:
        AnnotationError: If a section is missing or a block has no role
    """
    try:
        chart_type = payload['task1']['output']['chart_type']
        text_blocks = payload['task2']['output']['text_blocks']
        roles = payload['task3']['output']['text_roles']
    except (KeyError, TypeError) as e:
        raise AnnotationError(f"competition annotation lacks section {e}") from None
    if not isinstance(text_blocks, list) or not isinstance(roles, list):
        raise AnnotationError("text_blocks and text_roles must be lists")

    try:
        role_by_id = {item['id']: item['role'] for item in roles}
    except (KeyError, TypeError) as e:
        raise AnnotationError(f"malformed text role entry ({type(e).__name__}: {e})") from None
    blocks = []
    for block in text_blocks:
        if not isinstance(block, dict):
            raise AnnotationError(f"text block must be an object, got {block!r}")
        try:
            if block.get('id') not in role_by_id:
                raise AnnotationError(f"text block {block.get('id')} has no role")
            box = _block_box(block)
        except AnnotationError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationError(f"text block {block.get('id')} is malformed ({type(e).__name__}: {e})") from None
        blocks.append({
            'box': box.as_list(),
            'role': role_by_id[block['id']],
            'text': block.get('text', ''),
        })
    return {'chart_type': chart_type, 'blocks': blocks}


def parse_annotation(payload: dict, image_path: str) -> AnnotationRecord:
    """
    Build a record from a local-schema or competition dictionary.

    Raises:
        AnnotationError: On unknown chart types or roles, or malformed blocks
    """
    if 'task1' in payload:
        payload = convert_chartinfo(payload)
    if 'chart_type' not in payload:
        raise AnnotationError("missing 'chart_type'")
    chart_type = ChartType.from_label(payload['chart_type'])
    items = payload.get('blocks', [])
    if not isinstance(items, list):
        raise AnnotationError("'blocks' must be a list")
    blocks = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise AnnotationError(f"block {i} must be an object")
        try:
            box = BBox.from_sequence(item['box'])
            role = TextRole.from_label(item['role'])
            text = item['text']
        except KeyError as e:
            raise AnnotationError(f"block {i} lacks {e}") from None
        except AnnotationError:
            raise
        except (TypeError, ValueError) as e:
            raise AnnotationError(f"block {i} has a malformed box ({type(e).__name__}: {e})") from None
        if not isinstance(text, str):
            raise AnnotationError(f"block {i} text must be a string")
        blocks.append(TextBlock(box=box, role=role, transcript=text))
    return AnnotationRecord(image_path=image_path, chart_type=chart_type, blocks=tuple(blocks))


def _image_for(json_path: str, payload: dict) -> str:
    folder = os.path.dirname(json_path)
    if isinstance(payload.get('image'), str):
        path = os.path.join(folder, payload['image'])
        if os.path.exists(path):
            return path
        raise AnnotationError(f"image file not found: {path}")
    stem = os.path.splitext(json_path)[0]
    for ext in IMAGE_EXTENSIONS + tuple(e.upper() for e in IMAGE_EXTENSIONS):
        if os.path.exists(stem + ext):
            return stem + ext
    raise AnnotationError(f"no image file next to the annotation (looked for {stem}.png/.jpg/.jpeg)")


def load_annotation_file(json_path: str) -> AnnotationRecord:
    """
    Read one annotation file.

    Raises:
        AnnotationError: Malformed JSON, missing image, unknown labels; the message carries the path
    """
    try:
        with open(json_path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"malformed JSON: {e}", path=json_path) from e
    except OSError as e:
        raise AnnotationError(f"cannot read: {e}", path=json_path) from e
    if not isinstance(payload, dict):
        raise AnnotationError("top level must be an object", path=json_path)
    try:
        return parse_annotation(payload, _image_for(json_path, payload))
    except AnnotationError as e:
        raise AnnotationError(str(e), path=json_path) from e
    except ExtractionError as e:
        raise AnnotationError(str(e), path=json_path) from e


def scan_annotations(root: str) -> Tuple[List[AnnotationRecord], List[Tuple[str, str]]]:
    """
    Read every *.json file under root, collecting failures instead of stopping.

    Returns:
        (records sorted by image path, [(json path, message)] failures)
    """
    records, failures = [], []
    for folder, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            if not name.lower().endswith('.json'):
                continue
            path = os.path.join(folder, name)
            try:
                records.append(load_annotation_file(path))
            except AnnotationError as e:
                failures.append((path, str(e)))
    records.sort(key=lambda r: r.image_path)
    return records, failures


def load_annotations(root: str) -> List[AnnotationRecord]:
    """
    Load one record per annotated image under root.

    Raises:
        DataError: If root is not a directory
        AnnotationError: Listing every file that failed, one line per file
    """
    if not os.path.isdir(root):
        raise DataError(f"annotation directory not found: {root}")
    records, failures = scan_annotations(root)
    if failures:
        report = '\n'.join(message for _, message in failures)
        raise AnnotationError(f"{len(failures)} annotation files rejected:\n{report}")
    logger.info("Loaded %d annotation records from %s", len(records), root)
    return records


def load_labeled(record: AnnotationRecord) -> LabeledImage:
    """
    Read the image of a record.

    Boxes overrunning the frame are clipped; boxes left empty by clipping are dropped.

    Raises:
        DataError: If the image cannot be read
    """
    pixels = load_image(record.image_path)
    height, width = pixels.shape[:2]
    blocks = []
    for block in record.blocks:
        box = block.box.clip(width, height)
        if box is None:
            logger.warning("%s: dropped block %r outside the image", record.image_path, block.transcript)
            continue
        blocks.append(TextBlock(box=box, role=block.role, transcript=block.transcript))
    return LabeledImage(pixels=pixels, chart_type=record.chart_type, blocks=tuple(blocks),
                        source_id=record.image_path)


def annotation_payload(item) -> dict:
    """Local-schema dictionary for an AnnotationRecord or LabeledImage."""
    return {
        'chart_type': item.chart_type.label,
        'blocks': [block.to_dict() for block in item.blocks],
    }


def save_annotation(item, path: str, image_name: str = None):
    payload = annotation_payload(item)
    if image_name:
        payload['image'] = image_name
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
