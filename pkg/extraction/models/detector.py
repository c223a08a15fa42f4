"""
One-stage grid text detector.

The image is resized to config.input_size and split into grids of equal
cells at one or more scales. Every cell predicts, for each of its anchors,
(dx, dy, dw, dh, objectness); decoding maps these onto absolute boxes:

    center = (cell + sigmoid(dx, dy)) * stride
    size   = anchor * exp(dw, dh)

Detections are filtered by objectness, suppressed with greedy NMS and
finally merged into logical blocks (a multi-line title becomes one block).
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from ..common import resize_tensor, seed_everything, to_tensor
from ..config import DetectorConfig, TrainSchedule
from ..core.base_stage import DetectionStage
from ..core.geometry import BBox
from ..errors import DataError, ModelError
from .training import TrainingCurve, batch_order, log_step, make_optimizer, progress

logger = logging.getLogger(__name__)

# Raw size logits are clamped so exp() stays finite and boxes stay non-empty.
_MAX_LOG_SCALE = 10.0


@dataclass(frozen=True)
class Detection:
    """A detected text block: a box and its objectness in [0, 1]."""

    box: BBox
    objectness: float

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must lie in [0, 1], got {self.objectness}")


def _conv(in_channels, out_channels, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
        nn.LeakyReLU(0.1),
    )


class GridDetector(nn.Module):
    """
    Small convolutional backbone with one 1x1 prediction head per scale.

    Each stride-2 stage halves the resolution; a head is attached wherever
    the running stride equals the stride of a configured grid.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        strides = config.strides()
        channels = config.channels
        self.stem = _conv(3, channels)
        self.downs = nn.ModuleList()
        self.tap_channels = {}
        stride = 1
        while stride < max(strides):
            out_channels = min(channels * 2, config.channels * 8)
            self.downs.append(nn.Sequential(_conv(channels, out_channels, stride=2),
                                            _conv(out_channels, out_channels)))
            channels = out_channels
            stride *= 2
            self.tap_channels[stride] = channels
        outputs = config.anchors_per_scale * 5
        self.heads = nn.ModuleList([nn.Conv2d(self.tap_channels[s], outputs, 1) for s in strides])
        if config.zero_init_head:
            for head in self.heads:
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def forward(self, x: Tensor) -> List[Tensor]:
        """
        Args:
            x: [B, 3, H, W] images at config.input_size

        Returns:
            One raw tensor [B, G, G, A, 5] per scale
        """
        taps = {}
        stride = 1
        x = self.stem(x)
        for down in self.downs:
            x = down(x)
            stride *= 2
            taps[stride] = x
        raws = []
        for head, s, grid in zip(self.heads, self.config.strides(), self.config.grid_sizes):
            out = head(taps[s])
            batch = out.shape[0]
            raws.append(out.view(batch, self.config.anchors_per_scale, 5, grid, grid).permute(0, 3, 4, 1, 2))
        return raws


def decode_boxes(raw: Tensor, anchors: Sequence[Tuple[int, int]], stride: int):
    """
    Decode one scale of raw outputs into corner boxes.

    Args:
        raw: [..., G, G, A, 5] raw outputs
        anchors: A (w, h) priors in input pixels
        stride: Input pixels per cell

    Returns:
        (boxes [..., G, G, A, 4] as x_min, y_min, x_max, y_max; objectness [..., G, G, A])
    """
    grid = raw.shape[-3]
    cells = torch.arange(grid, dtype=raw.dtype, device=raw.device)
    cy = cells.view(grid, 1, 1)
    cx = cells.view(1, grid, 1)
    anchor = torch.as_tensor(anchors, dtype=raw.dtype, device=raw.device)
    center_x = (cx + torch.sigmoid(raw[..., 0])) * stride
    center_y = (cy + torch.sigmoid(raw[..., 1])) * stride
    width = anchor[:, 0] * torch.exp(raw[..., 2].clamp(-_MAX_LOG_SCALE, _MAX_LOG_SCALE))
    height = anchor[:, 1] * torch.exp(raw[..., 3].clamp(-_MAX_LOG_SCALE, _MAX_LOG_SCALE))
    boxes = torch.stack([center_x - width / 2, center_y - height / 2,
                         center_x + width / 2, center_y + height / 2], dim=-1)
    return boxes, torch.sigmoid(raw[..., 4])


def _check_raw(raws: Sequence[Tensor], config: DetectorConfig):
    if len(raws) != len(config.grid_sizes):
        raise ModelError(f"expected {len(config.grid_sizes)} scales of head output, got {len(raws)}")
    for raw, grid in zip(raws, config.grid_sizes):
        expected = (grid, grid, config.anchors_per_scale, 5)
        if tuple(raw.shape[-4:]) != expected:
            raise ModelError(f"head output shape {tuple(raw.shape)} does not match {expected}")


def decode_grid(raws: Sequence[Tensor], config: DetectorConfig) -> List[Detection]:
    """
    Decode the raw head outputs of one image into detections.

    Args:
        raws: One [G, G, A, 5] tensor per scale
        config: Detector configuration (grids, anchors, input size)

    Returns:
        Every cell/anchor as a Detection in input-image pixels, scale by
        scale in row-major cell order, before any thresholding

    Raises:
        ModelError: If a tensor shape does not match the configuration
    """
    _check_raw(raws, config)
    detections = []
    for raw, anchors, stride in zip(raws, config.anchors, config.strides()):
        boxes, objectness = decode_boxes(raw.detach().to(torch.float64), anchors, stride)
        for box, score in zip(boxes.reshape(-1, 4).tolist(), objectness.reshape(-1).tolist()):
            detections.append(Detection(BBox(*box), score))
    return detections


def _pairwise_iou(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    w = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    h = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """
    Greedy non-maximum suppression.

    Detections are visited by descending objectness (ties keep input order);
    a detection is dropped if its IoU with an already kept one exceeds
    iou_threshold.

    Returns:
        Kept detections, highest objectness first
    """
    if not dets:
        return []
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64)
    scores = np.array([d.objectness for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind='stable')
    keep = []
    while order.size:
        best = order[0]
        keep.append(best)
        rest = order[1:]
        order = rest[_pairwise_iou(boxes[best], boxes[rest]) <= iou_threshold]
    return [dets[i] for i in keep]


def _mergeable(a: BBox, b: BBox, max_gap: float) -> bool:
    overlap = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    if overlap < 0.5 * min(a.width, b.width):
        return False
    gap = max(a.y_min, b.y_min) - min(a.y_max, b.y_max)
    return gap <= max_gap


def _merge_once(dets: List[Detection], gap_threshold: float) -> List[Detection]:
    max_gap = gap_threshold * float(np.median([d.box.height for d in dets]))
    parent = list(range(len(dets)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(dets)):
        for j in range(i + 1, len(dets)):
            if _mergeable(dets[i].box, dets[j].box, max_gap):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups = {}
    for i in range(len(dets)):
        groups.setdefault(find(i), []).append(dets[i])
    merged = []
    for root in sorted(groups):
        members = groups[root]
        box = members[0].box
        for member in members[1:]:
            box = box.union(member.box)
        merged.append(Detection(box, max(m.objectness for m in members)))
    return merged


def merge_logical_blocks(dets: Sequence[Detection], gap_threshold: float) -> List[Detection]:
    """
    Merge stacked text lines into logical blocks.

    Two boxes join when their horizontal spans overlap by at least half the
    narrower width and the vertical gap between them is at most
    gap_threshold times the median box height. Joining is transitive and
    repeated until nothing changes, so the result is stable under a second
    call. A merged block is the union hull with the highest objectness of its
    members; blocks keep the order of their first member.
    """
    current = list(dets)
    while len(current) > 1:
        merged = _merge_once(current, gap_threshold)
        if len(merged) == len(current):
            break
        current = merged
    return current


def _shape_iou(sizes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    inter = np.minimum(sizes[:, None, 0], centroids[None, :, 0]) * np.minimum(sizes[:, None, 1], centroids[None, :, 1])
    union = sizes[:, None, 0] * sizes[:, None, 1] + centroids[None, :, 0] * centroids[None, :, 1] - inter
    return inter / union


def kmeans_anchors(sizes: np.ndarray, num_scales: int, anchors_per_scale: int, seed: int = 0,
                   iterations: int = 100):
    """
    Cluster box sizes into anchor priors with a 1 - IoU distance.

    Args:
        sizes: [N, 2] box (w, h) in detector input pixels
        num_scales: Number of grid scales
        anchors_per_scale: Anchors per cell
        seed: Seed for the initial centroids

    Returns:
        Anchors grouped per scale, smallest areas on the finest scale

    Raises:
        DataError: With fewer distinct sizes than anchors
    """
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    k = num_scales * anchors_per_scale
    if len(np.unique(sizes, axis=0)) < k:
        raise DataError(f"need at least {k} distinct box sizes to fit anchors, got {len(np.unique(sizes, axis=0))}")
    rng = np.random.default_rng(seed)
    centroids = sizes[rng.choice(len(sizes), size=k, replace=False)]
    assignment = None
    for _ in range(iterations):
        nearest = np.argmax(_shape_iou(sizes, centroids), axis=1)
        if assignment is not None and np.array_equal(nearest, assignment):
            break
        assignment = nearest
        for c in range(k):
            members = sizes[assignment == c]
            if len(members):
                centroids[c] = np.median(members, axis=0)
    centroids = centroids[np.argsort(centroids[:, 0] * centroids[:, 1], kind='stable')]
    anchors = [tuple(max(1, int(round(v))) for v in c) for c in centroids]
    return tuple(tuple(anchors[s * anchors_per_scale:(s + 1) * anchors_per_scale]) for s in range(num_scales))


def _box_iou(a: Tensor, b: Tensor) -> Tensor:
    w = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    h = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = w * h
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter
    return inter / union.clamp(min=1e-9)


def assign_targets(boxes: Sequence[BBox], config: DetectorConfig):
    """
    Assign each ground-truth box to the anchor with the best shape IoU.

    Args:
        boxes: Ground-truth boxes in detector input pixels

    Returns:
        Per scale: (objectness target [G, G, A], box target [G, G, A, 4])
    """
    targets = [(torch.zeros(g, g, config.anchors_per_scale), torch.zeros(g, g, config.anchors_per_scale, 4))
               for g in config.grid_sizes]
    flat = [(s, a, w, h) for s, scale in enumerate(config.anchors) for a, (w, h) in enumerate(scale)]
    priors = np.array([[w, h] for _, _, w, h in flat], dtype=np.float64)
    for box in boxes:
        best = int(np.argmax(_shape_iou(np.array([[box.width, box.height]]), priors)[0]))
        scale, anchor = flat[best][:2]
        grid, stride = config.grid_sizes[scale], config.strides()[scale]
        cx, cy = box.center
        col = min(grid - 1, max(0, int(cx // stride)))
        row = min(grid - 1, max(0, int(cy // stride)))
        objectness, box_target = targets[scale]
        objectness[row, col, anchor] = 1.0
        box_target[row, col, anchor] = torch.tensor(box.as_list())
    return targets


def detection_loss(raws: Sequence[Tensor], targets, config: DetectorConfig):
    """
    Box regression (1 - IoU on assigned anchors) plus balanced objectness BCE.

    Objectness BCE is averaged separately over positive and negative slots
    and the two means are averaged, so an all-zero head scores ln 2.

    Returns:
        (total, box term, objectness term)
    """
    box_terms, positive_terms, negative_terms = [], [], []
    for raw, (objectness, box_target), anchors, stride in zip(raws, targets, config.anchors, config.strides()):
        boxes, _ = decode_boxes(raw, anchors, stride)
        logits = raw[..., 4]
        positive = objectness > 0.5
        bce = F.binary_cross_entropy_with_logits(logits, objectness, reduction='none')
        if positive.any():
            box_terms.append(1.0 - _box_iou(boxes[positive], box_target[positive]))
            positive_terms.append(bce[positive])
        negative_terms.append(bce[~positive])
    zero = raws[0].sum() * 0.0
    box_loss = torch.cat(box_terms).mean() if box_terms else zero
    positive_loss = torch.cat(positive_terms).mean() if positive_terms else zero
    negative_loss = torch.cat(negative_terms).mean()
    objectness_loss = 0.5 * (positive_loss + negative_loss) if positive_terms else negative_loss
    return box_loss + objectness_loss, box_loss, objectness_loss


def _to_input(pixels: np.ndarray, config: DetectorConfig) -> Tensor:
    return resize_tensor(to_tensor(pixels), config.input_size)


def _input_boxes(image, config: DetectorConfig) -> List[BBox]:
    sy = config.input_size[0] / image.height
    sx = config.input_size[1] / image.width
    return [block.box.scale(sx, sy) for block in image.blocks]


def train_detector(images, config: DetectorConfig, schedule: TrainSchedule):
    """
    Train the grid detector from scratch.

    Args:
        images: LabeledImage list; images without blocks are skipped
        config: Detector configuration
        schedule: Optimization schedule

    Returns:
        (model in eval mode, TrainingCurve with 'box' and 'objectness' components)

    Raises:
        DataError: If no image has a block
    """
    usable = [image for image in images if image.blocks]
    skipped = len(images) - len(usable)
    if skipped:
        logger.warning("Skipped %d training images without text blocks", skipped)
    if not usable:
        raise DataError("no training image has a text block")

    generator = seed_everything(schedule.seed)
    model = GridDetector(config)
    model.train()
    optimizer = make_optimizer(model.parameters(), schedule)

    inputs = torch.cat([_to_input(image.pixels, config) for image in usable])
    per_image = [assign_targets(_input_boxes(image, config), config) for image in usable]
    targets = [(torch.stack([t[s][0] for t in per_image]), torch.stack([t[s][1] for t in per_image]))
               for s in range(len(config.grid_sizes))]

    curve = TrainingCurve('detector')
    for step, indices, _ in progress(batch_order(len(usable), schedule, generator), 'detector'):
        raws = model(inputs[indices])
        batch_targets = [(obj[indices], box[indices]) for obj, box in targets]
        loss, box_loss, objectness_loss = detection_loss(raws, batch_targets, config)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.losses.append(float(loss))
        curve.add('box', float(box_loss))
        curve.add('objectness', float(objectness_loss))
        log_step('detector', step, float(loss))

    model.eval()
    return model, curve


@torch.no_grad()
def detect(pixels: np.ndarray, model: GridDetector, config: DetectorConfig = None,
           threshold: float = None) -> List[Detection]:
    """
    Find logical text blocks in an image.

    Args:
        pixels: H x W x 3 array in [0, 1]
        model: Trained GridDetector
        config: Overrides model.config for post-processing thresholds
        threshold: Overrides the confidence threshold; objectness must exceed it

    Returns:
        Detections in image pixels, clipped to the image, after NMS and block merging
    """
    config = config or model.config
    threshold = config.confidence_threshold if threshold is None else threshold
    height, width = pixels.shape[:2]
    sx = width / config.input_size[1]
    sy = height / config.input_size[0]

    model.eval()
    raws = model(_to_input(pixels, config))
    candidates = []
    for raw, anchors, stride in zip(raws, config.anchors, config.strides()):
        boxes, objectness = decode_boxes(raw[0].to(torch.float64), anchors, stride)
        keep = objectness > threshold
        for box, score in zip(boxes[keep].tolist(), objectness[keep].tolist()):
            clipped = BBox(box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy).clip(width, height)
            if clipped is not None:
                candidates.append(Detection(clipped, score))
    kept = nms(candidates, config.nms_iou_threshold)
    return merge_logical_blocks(kept, config.merge_gap_threshold)


class GridTextDetector(DetectionStage):
    """Pipeline adapter around a trained GridDetector."""

    def __init__(self, model: GridDetector):
        self.model = model

    def detect(self, pixels, context):
        return detect(self.check_pixels(pixels), self.model)
