"""
Context management for per-image extraction.

The StageContext dataclass is an immutable container for the state one image
accumulates while it moves through the stages. Stages read it and the
pipeline derives updated copies, so concurrent images never share mutable
state.
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

from .vocab import ChartType


@dataclass(frozen=True)
class StageContext:
    """
    Immutable context passed from stage to stage.

    Attributes:
        source_id: Identifier of the image being processed
        image_size: (H, W) of the original image
        chart_type: Chart type predicted by the first stage, once known
        chart_confidence: Confidence of that prediction
        outscale: Upscaling factor applied to text crops
        crop_margin: Pixels added around each detected box before cropping
        block_index: Index of the block currently being processed
    """

    source_id: str = ''
    image_size: Tuple[int, int] = (0, 0)
    chart_type: Optional[ChartType] = None
    chart_confidence: float = 0.0
    outscale: float = 1.5
    crop_margin: float = 1.0
    block_index: int = -1

    def with_chart_type(self, chart_type: ChartType, confidence: float) -> 'StageContext':
        """
        Return new context carrying the chart-type prediction.

        Args:
            chart_type: Predicted chart type
            confidence: Its softmax confidence

        Returns:
            New StageContext
        """
        return replace(self, chart_type=chart_type, chart_confidence=confidence)

    def with_block(self, index: int) -> 'StageContext':
        """Return new context pointing at block number index."""
        return replace(self, block_index=index)

    def with_outscale(self, outscale: float) -> 'StageContext':
        return replace(self, outscale=outscale)

    @property
    def is_upscaling(self) -> bool:
        return self.outscale != 1.0
