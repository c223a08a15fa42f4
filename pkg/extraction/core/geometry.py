"""
Axis-aligned box geometry.

Boxes are corner pairs in continuous pixel coordinates with the origin at the
top-left corner of the image. The max edge is exclusive: a box
(0, 0, 10, 10) covers pixel rows and columns 0..9.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..errors import GeometryError


@dataclass(frozen=True)
class BBox:
    """
    Immutable axis-aligned box.

    Attributes:
        x_min: Left edge
        y_min: Top edge
        x_max: Right edge (exclusive)
        y_max: Bottom edge (exclusive)
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"box has non-finite coordinates: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"box is empty or inverted: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> 'BBox':
        """Build a box from a top-left corner plus width and height."""
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> 'BBox':
        """Build a box from [x_min, y_min, x_max, y_max]."""
        if len(values) != 4:
            raise GeometryError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def union(self, other: 'BBox') -> 'BBox':
        """Return the smallest box containing both boxes."""
        return BBox(min(self.x_min, other.x_min), min(self.y_min, other.y_min),
                    max(self.x_max, other.x_max), max(self.y_max, other.y_max))

    def scale(self, sx: float, sy: float) -> 'BBox':
        """Return the box with x coordinates multiplied by sx and y by sy."""
        return BBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def expand(self, margin: float) -> 'BBox':
        """Return the box grown by margin pixels on every side."""
        return replace(self, x_min=self.x_min - margin, y_min=self.y_min - margin,
                       x_max=self.x_max + margin, y_max=self.y_max + margin)

    def clip(self, width: float, height: float) -> Optional['BBox']:
        """
        Clip the box to the frame [0, width] x [0, height].

        Returns:
            The clipped box, or None when nothing of positive area remains
        """
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox(x0, y0, x1, y1)

    def within(self, width: float, height: float) -> bool:
        return (self.x_min >= 0 and self.y_min >= 0
                and self.x_max <= width and self.y_max <= height)


def box_area(a: BBox) -> float:
    """Area of a box in square pixels."""
    return (a.x_max - a.x_min) * (a.y_max - a.y_min)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """
    Intersection over union of two boxes.

    Args:
        a: First box
        b: Second box

    Returns:
        Value in [0, 1]; 1.0 exactly for identical boxes, 0.0 when disjoint
    """
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (box_area(a) + box_area(b) - inter)


def pixel_bounds(box: BBox, width: int, height: int):
    """
    Integer pixel bounds of a box clipped to an image, rounded outward.

    Returns:
        (row0, row1, col0, col1) with exclusive ends

    Raises:
        GeometryError: If the box does not intersect the image
    """
    clipped = box.clip(width, height)
    if clipped is None:
        raise GeometryError("box outside image")
    col0 = int(math.floor(clipped.x_min))
    row0 = int(math.floor(clipped.y_min))
    col1 = int(math.ceil(clipped.x_max))
    row1 = int(math.ceil(clipped.y_max))
    return row0, row1, col0, col1


def crop(img, box: BBox) -> np.ndarray:
    """
    Cut the pixels under a box out of an image.

    The box is clipped to the image and rounded outward to whole pixels, so
    detector boxes that slightly overrun the frame still crop cleanly.

    Args:
        img: LabeledImage, or a bare H x W x C pixel array
        box: Box in image coordinates

    Returns:
        Copy of the pixel sub-array

    Raises:
        GeometryError: If the box does not intersect the image ("box outside image")
    """
    pixels = getattr(img, 'pixels', img)
    height, width = pixels.shape[:2]
    row0, row1, col0, col1 = pixel_bounds(box, width, height)
    return np.array(pixels[row0:row1, col0:col1], copy=True)
