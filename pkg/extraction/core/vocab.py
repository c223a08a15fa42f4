"""
Closed label vocabularies shared by every stage.

Integer codes are stable: classifier heads index their logits with them and
parameter bundles depend on them, so members must never be reordered.
"""

from enum import IntEnum

from ..errors import AnnotationError


_KINDS = {'ChartType': 'chart type', 'TextRole': 'text role'}


def _normalize_label(label: str) -> str:
    # Competition files spell labels as 'vertical bar' or 'tick_label'.
    return label.strip().lower().replace('_', '-').replace(' ', '-')


class _LabelEnum(IntEnum):
    """IntEnum whose members also carry a hyphenated text label."""

    @property
    def label(self) -> str:
        return self.name.lower().replace('_', '-')

    @classmethod
    def from_label(cls, label: str):
        """
        Look up a member from its text label.

        Args:
            label: Label such as 'tick-label', 'tick_label' or 'Vertical Bar'

        Returns:
            The matching member

        Raises:
            AnnotationError: If the label is not part of the vocabulary
        """
        if not isinstance(label, str):
            raise AnnotationError(f"{_KINDS[cls.__name__]} label must be a string, got {label!r}")
        key = _normalize_label(label).upper().replace('-', '_')
        try:
            return cls[key]
        except KeyError:
            raise AnnotationError(f"unknown {_KINDS[cls.__name__]} {label!r}") from None

    @classmethod
    def labels(cls):
        return [member.label for member in cls]


class ChartType(_LabelEnum):
    """The fifteen chart categories."""

    HORIZONTAL_BAR = 0
    VERTICAL_BAR = 1
    LINE = 2
    SCATTER = 3
    SCATTER_LINE = 4
    VERTICAL_BOX = 5
    AREA = 6
    HEATMAP = 7
    HORIZONTAL_INTERVAL = 8
    MANHATTAN = 9
    MAP = 10
    PIE = 11
    SURFACE = 12
    VENN = 13
    VERTICAL_INTERVAL = 14


class TextRole(_LabelEnum):
    """The nine functional roles a text block can play in a chart."""

    CHART_TITLE = 0
    MARK_LABEL = 1
    LEGEND_TITLE = 2
    LEGEND_LABEL = 3
    AXIS_TITLE = 4
    TICK_LABEL = 5
    TICK_GROUPING = 6
    VALUE_LABEL = 7
    OTHER = 8


# Chart types the synthetic generator can draw.
SYNTHETIC_CHART_TYPES = (
    ChartType.HORIZONTAL_BAR,
    ChartType.VERTICAL_BAR,
    ChartType.LINE,
    ChartType.SCATTER,
)
