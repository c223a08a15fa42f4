"""
common.py - Shared utilities for chart extraction

Image IO, tensor conversion, resampling, seeding and file discovery.
"""

import glob
import hashlib
import json
import math
import os
import random

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg')


def load_image(path):
    """
    Load an image file as RGB pixels.

    Args:
        path: Path to a PNG or JPEG file

    Returns:
        H x W x 3 float32 array with values in [0, 1]

    Raises:
        DataError: If the file is missing or not a readable image
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert('RGB')
            rgb.load()
    except FileNotFoundError as e:
        raise DataError(f"image not found: {path}") from e
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise DataError(f"unreadable image {path}: {e}") from e
    return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(pixels, path):
    """Write an H x W x 3 array in [0, 1] as an 8-bit image."""
    array = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)


def find_images(directory):
    """
    List image files in a directory.

    Args:
        directory: Directory to scan (not recursive)

    Returns:
        Sorted list of image paths (empty if none found)
    """
    paths = []
    for ext in IMAGE_EXTENSIONS:
        paths.extend(glob.glob(os.path.join(directory, f'*{ext}')))
        paths.extend(glob.glob(os.path.join(directory, f'*{ext.upper()}')))
    return sorted(set(paths))


def to_tensor(pixels, dtype=torch.float32):
    """H x W x C array -> 1 x C x H x W tensor."""
    array = np.ascontiguousarray(pixels, dtype=np.float32)
    if array.ndim == 2:
        array = array[:, :, None]
    return torch.from_numpy(array).permute(2, 0, 1).unsqueeze(0).to(dtype)


def to_pixels(tensor):
    """1 x C x H x W tensor -> H x W x C float32 array."""
    return tensor.detach().squeeze(0).permute(1, 2, 0).to(torch.float32).cpu().numpy()


def resize_tensor(x, size):
    """Bilinear resize of an N x C x H x W tensor to size=(H, W)."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode='bilinear', align_corners=False)


def resize_pixels(pixels, size):
    """Bilinear resize of an H x W x C array to size=(H, W), aspect ratio not preserved."""
    return to_pixels(resize_tensor(to_tensor(pixels), size))


def to_grayscale(x):
    """N x 3 x H x W -> N x 1 x H x W using ITU-R 601 luma weights."""
    if x.shape[1] == 1:
        return x
    weights = x.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    return (x * weights).sum(dim=1, keepdim=True)


def ensure_min_size(pixels, minimum):
    """Enlarge an H x W x C array so both sides are at least minimum, keeping aspect."""
    height, width = pixels.shape[:2]
    if height >= minimum and width >= minimum:
        return pixels
    factor = minimum / min(height, width)
    size = (max(minimum, math.ceil(height * factor)), max(minimum, math.ceil(width * factor)))
    return resize_pixels(pixels, size)


def scaled_size(height, width, outscale):
    """Output size law of the upscaler: ceil(dim * outscale) per side."""
    # The epsilon keeps 60 * 1.5 at 90 despite binary rounding.
    return (max(1, math.ceil(height * outscale - 1e-9)), max(1, math.ceil(width * outscale - 1e-9)))


def seed_everything(seed):
    """Seed python, numpy and torch; returns a torch.Generator seeded the same way."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def fingerprint(records):
    """
    Content fingerprint of a dataset.

    Args:
        records: Iterable of AnnotationRecord or LabeledImage

    Returns:
        Hex SHA-256 over source ids, chart types and block annotations
    """
    digest = hashlib.sha256()
    for record in sorted(records, key=lambda r: r.source_id):
        chart_type = record.chart_type.label if record.chart_type is not None else None
        blocks = [block.to_dict() for block in record.blocks]
        digest.update(json.dumps([record.source_id, chart_type, blocks], sort_keys=True).encode('utf-8'))
    return digest.hexdigest()
