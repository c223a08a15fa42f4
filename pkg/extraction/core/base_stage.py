"""
Abstract stage interfaces for the extraction pipeline.

The pipeline only talks to these interfaces, so any detector, upscaler or
classifier honoring them can be dropped into a bundle. Concrete adapters
around the trained networks live in extraction.models.
"""

from abc import ABC, abstractmethod
from typing import List, Tuple, TYPE_CHECKING

import numpy as np

from .vocab import ChartType, TextRole

if TYPE_CHECKING:
    from .context import StageContext
    from ..models.detector import Detection


class BaseStage(ABC):
    """
    Common base of all stages.

    Subclasses set `name` to one of the STAGE_NAMES keys used in timings.
    """

    name = ''

    def check_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """
        Validate an H x W x 3 pixel array.

        Args:
            pixels: Candidate array

        Returns:
            The array as float32
        """
        array = np.asarray(pixels, dtype=np.float32)
        if array.ndim != 3 or array.shape[2] != 3 or 0 in array.shape:
            raise ValueError(f"{self.name}: expected H x W x 3 pixels, got {array.shape}")
        return array


class ChartTypeStage(BaseStage):
    name = 'chart_type'

    @abstractmethod
    def classify(self, pixels: np.ndarray, context: 'StageContext') -> Tuple[ChartType, float]:
        """Return the chart type of a whole image and its confidence."""
        pass


class DetectionStage(BaseStage):
    name = 'detection'

    @abstractmethod
    def detect(self, pixels: np.ndarray, context: 'StageContext') -> List['Detection']:
        """Return logical text blocks found in the image, clipped to it."""
        pass


class UpscaleStage(BaseStage):
    name = 'upscaling'

    @abstractmethod
    def upscale(self, crop: np.ndarray, context: 'StageContext') -> np.ndarray:
        """Return the crop resampled by context.outscale."""
        pass


class RecognitionStage(BaseStage):
    name = 'recognition'

    @abstractmethod
    def recognize(self, crop: np.ndarray, context: 'StageContext') -> Tuple[str, float]:
        """Return the transcript of a text crop and its confidence."""
        pass


class RoleStage(BaseStage):
    name = 'text_role'

    @abstractmethod
    def classify_role(self, crop: np.ndarray, context: 'StageContext') -> Tuple[TextRole, float]:
        """Return the role of a text crop and its confidence."""
        pass
