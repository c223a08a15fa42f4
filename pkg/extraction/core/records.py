"""
Record types that flow between the extraction stages.

All records are frozen dataclasses and safe to share between workers.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..errors import DataError, GeometryError
from .geometry import BBox
from .vocab import ChartType, TextRole

# Version of the ExtractionResult JSON layout.
RESULT_SCHEMA_VERSION = '1.0'

# Stage names, in pipeline order; ExtractionResult.timings uses these keys.
STAGE_NAMES = ('chart_type', 'detection', 'upscaling', 'recognition', 'text_role')


@dataclass(frozen=True)
class TextBlock:
    """
    One logical text block: a box plus whatever the stages learned about it.

    Attributes:
        box: Location in image coordinates
        role: Functional role, once known
        transcript: Recognized or annotated text, once known
        confidence: Detection or recognition confidence in [0, 1]
        role_confidence: Role classifier confidence in [0, 1]
    """

    box: BBox
    role: Optional[TextRole] = None
    transcript: Optional[str] = None
    confidence: Optional[float] = None
    role_confidence: Optional[float] = None

    def __post_init__(self):
        for name in ('confidence', 'role_confidence'):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise DataError(f"{name} must lie in [0, 1], got {value}")

    def to_dict(self) -> dict:
        """Serialize in the annotation schema ({"box", "role", "text"})."""
        return {
            'box': self.box.as_list(),
            'role': self.role.label if self.role is not None else None,
            'text': self.transcript,
        }


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """
    An RGB chart image with its labels.

    Attributes:
        pixels: H x W x 3 float32 array with values in [0, 1]
        chart_type: Chart category, when known
        blocks: Ground-truth text blocks
        source_id: Stable identifier (file stem for loaded images)
    """

    pixels: np.ndarray
    chart_type: Optional[ChartType] = None
    blocks: Tuple[TextBlock, ...] = ()
    source_id: str = ''

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"pixels must be H x W x 3, got shape {self.pixels.shape}")
        height, width = self.pixels.shape[:2]
        if height < 1 or width < 1:
            raise DataError("image must be at least 1 x 1")
        object.__setattr__(self, 'blocks', tuple(self.blocks))
        for block in self.blocks:
            if not block.box.within(width, height):
                raise GeometryError(
                    f"{self.source_id}: block box {block.box.as_list()} exceeds "
                    f"{width} x {height} image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AnnotationRecord:
    """
    One annotation file: an image path, its chart type, and its text blocks.

    Every block carries a box, a role and a transcript.
    """

    image_path: str
    chart_type: ChartType
    blocks: Tuple[TextBlock, ...] = ()

    @property
    def source_id(self) -> str:
        return self.image_path

    def to_dict(self) -> dict:
        return {
            'chart_type': self.chart_type.label,
            'blocks': [block.to_dict() for block in self.blocks],
        }


@dataclass(frozen=True)
class ExtractionResult:
    """
    Final structured output of the pipeline for one image.

    Every block carries a role, a transcript and both confidences.
    """

    chart_type: ChartType
    chart_confidence: float
    blocks: Tuple[TextBlock, ...] = ()
    timings: Dict[str, float] = field(default_factory=dict)
    source_id: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'blocks', tuple(self.blocks))
        for block in self.blocks:
            if block.role is None or block.transcript is None or block.confidence is None:
                raise DataError("extraction blocks need role, transcript and confidence")

    def to_dict(self, include_timings: bool = True) -> dict:
        """
        Serialize in the versioned result schema.

        Args:
            include_timings: Drop wall-clock timings for reproducibility checks

        Returns:
            JSON-ready dictionary
        """
        data = {
            'version': RESULT_SCHEMA_VERSION,
            'source': self.source_id,
            'chart_type': {
                'label': self.chart_type.label,
                'confidence': _round(self.chart_confidence),
            },
            'blocks': [
                {
                    'box': _box_json(block),
                    'role': block.role.label,
                    'role_confidence': _round(block.role_confidence or 0.0),
                    'text': block.transcript,
                    'text_confidence': _round(block.confidence),
                }
                for block in self.blocks
            ],
        }
        if include_timings:
            data['timings'] = {name: _round(self.timings.get(name, 0.0)) for name in STAGE_NAMES}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ExtractionResult':
        blocks = [
            TextBlock(
                box=BBox.from_sequence(item['box']),
                role=TextRole.from_label(item['role']),
                transcript=item['text'],
                confidence=item['text_confidence'],
                role_confidence=item.get('role_confidence'),
            )
            for item in data.get('blocks', [])
        ]
        return cls(
            chart_type=ChartType.from_label(data['chart_type']['label']),
            chart_confidence=data['chart_type']['confidence'],
            blocks=blocks,
            timings=dict(data.get('timings', {})),
            source_id=data.get('source', ''),
        )


def _box_json(block: TextBlock):
    return [_round(v) for v in block.box.as_list()]


def _round(value: float) -> float:
    # Fixed precision keeps the JSON stable across platforms.
    value = float(value)
    if not math.isfinite(value):
        return 0.0
    return round(value, 6)
