"""
crops.py - Per-block training samples cut from labeled charts

Role and recognition models train on ground-truth crops; the upscaler trains
on fixed-size high/low resolution patch pairs cut from the same crops.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ..common import load_image, resize_pixels
from ..core.geometry import crop
from ..core.records import AnnotationRecord, TextBlock
from ..core.vocab import TextRole
from ..errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class CropStats:
    """
    What a crop builder kept and skipped.

    Attributes:
        samples: Crops produced
        skipped_images: Images that could not be read
        skipped_blocks: Blocks whose box was empty after clipping
        per_role: Crops per role label
    """

    samples: int = 0
    skipped_images: int = 0
    skipped_blocks: int = 0
    per_role: Counter = field(default_factory=Counter)

    @property
    def skipped(self) -> int:
        return self.skipped_images + self.skipped_blocks

    def to_dict(self) -> dict:
        return {
            'samples': self.samples,
            'skipped_images': self.skipped_images,
            'skipped_blocks': self.skipped_blocks,
            'per_role': dict(sorted(self.per_role.items())),
        }


def _pixels_and_blocks(item, stats: CropStats):
    # AnnotationRecords are read lazily so one unreadable file only costs its own blocks.
    if isinstance(item, AnnotationRecord):
        try:
            return load_image(item.image_path), item.blocks
        except DataError as e:
            logger.warning("Skipping %s: %s", item.image_path, e)
            stats.skipped_images += 1
            return None, ()
    return item.pixels, item.blocks


def block_crop(pixels: np.ndarray, block: TextBlock, margin: float = 1.0):
    """
    Crop one block with a margin, or None when the clipped box is empty.

    Args:
        pixels: H x W x 3 image
        block: Block whose box is cut out
        margin: Pixels added on every side before clipping

    Returns:
        Crop array or None
    """
    height, width = pixels.shape[:2]
    if block.box.clip(width, height) is None:
        return None
    piece = crop(pixels, block.box.expand(margin) if margin else block.box)
    if piece.shape[0] < 1 or piece.shape[1] < 1:
        return None
    return piece


def block_crops(items: Sequence, margin: float = 1.0):
    """
    Crop every usable ground-truth block.

    Args:
        items: AnnotationRecord or LabeledImage objects
        margin: Crop margin in pixels

    Returns:
        ([(crop, block, chart_type), ...], CropStats)
    """
    stats = CropStats()
    out = []
    for item in items:
        pixels, blocks = _pixels_and_blocks(item, stats)
        if pixels is None:
            continue
        for block in blocks:
            piece = block_crop(pixels, block, margin)
            if piece is None:
                stats.skipped_blocks += 1
                continue
            stats.samples += 1
            if block.role is not None:
                stats.per_role[block.role.label] += 1
            out.append((piece, block, item.chart_type))
    if stats.skipped:
        logger.warning("Skipped %d unreadable images and %d empty blocks",
                       stats.skipped_images, stats.skipped_blocks)
    return out, stats


def role_crop_dataset(items: Sequence, margin: float = 1.0) -> Tuple[List[Tuple[np.ndarray, TextRole]], CropStats]:
    """
    One (crop, role) sample per ground-truth block.

    Args:
        items: AnnotationRecord or LabeledImage objects
        margin: Crop margin in pixels

    Returns:
        (samples, CropStats with per-role counts and skip counts)
    """
    crops, stats = block_crops(items, margin)
    samples = [(piece, block.role) for piece, block, _ in crops if block.role is not None]
    logger.info("Built %d role crops: %s", len(samples), dict(stats.per_role))
    return samples, stats


def text_crop_dataset(items: Sequence, margin: float = 1.0, max_length: int = None):
    """
    (crop, transcript) pairs for the recognizer.

    Blocks without a transcript, or longer than max_length, are left out.

    Returns:
        (crops, transcripts, CropStats)
    """
    crops, stats = block_crops(items, margin)
    pieces, transcripts = [], []
    for piece, block, _ in crops:
        text = block.transcript
        if not text or (max_length is not None and len(text) > max_length):
            continue
        pieces.append(piece)
        transcripts.append(text)
    return pieces, transcripts, stats


def sr_patch_pairs(crops: Sequence[np.ndarray], native_scale: int = 2,
                   patch_size: int = 32) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Fixed-size (low, high) resolution pairs for the upscaler.

    Each crop is resized to patch_size rows keeping its aspect ratio, padded
    with white to at least patch_size columns, and its leftmost square patch
    becomes the high-resolution target. The low-resolution input is that
    patch shrunk by native_scale.

    Raises:
        DataError: If patch_size is not a multiple of native_scale
    """
    if patch_size % native_scale:
        raise DataError(f"patch size {patch_size} is not a multiple of scale {native_scale}")
    low = patch_size // native_scale
    pairs = []
    for piece in crops:
        height, width = piece.shape[:2]
        cols = max(1, int(round(width * patch_size / height)))
        hr = resize_pixels(piece, (patch_size, cols))
        if cols < patch_size:
            hr = np.pad(hr, ((0, 0), (0, patch_size - cols), (0, 0)), constant_values=1.0)
        hr = np.ascontiguousarray(hr[:, :patch_size]).clip(0.0, 1.0)
        pairs.append((resize_pixels(hr, (low, low)), hr))
    return pairs
