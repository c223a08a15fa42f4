"""
Hierarchical shifted-window transformer and its two classification heads.

Consecutive blocks compute

    z_hat(l)   = W-MSA(LN(z(l-1))) + z(l-1)
    z(l)       = MLP(LN(z_hat(l))) + z_hat(l)
    z_hat(l+1) = SW-MSA(LN(z(l))) + z(l)
    z(l+1)     = MLP(LN(z_hat(l+1))) + z_hat(l+1)

Feature maps use the [B, H, W, C] layout throughout.
"""

import functools
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from ..common import resize_tensor, seed_everything, to_tensor
from ..config import BackboneConfig, TrainSchedule
from ..core.base_stage import ChartTypeStage, RoleStage
from ..core.vocab import ChartType, TextRole
from ..errors import DataError, ModelError
from .training import TrainingCurve, batch_order, log_step, make_optimizer, progress

logger = logging.getLogger(__name__)


@dataclass
class FeatureMap:
    """Token grid of one stage: grid is [B, S, S, D]."""

    grid: Tensor
    stage: int

    @property
    def side(self) -> int:
        return self.grid.shape[1]


class PatchEmbedding(nn.Module):
    """Linear embedding of non-overlapping p x p x 3 patches."""

    def __init__(self, patch_size: int, embed_dim: int, in_channels: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: Tensor) -> Tensor:
        return patch_partition(x, self)


def patch_partition(img: Tensor, embedding: PatchEmbedding) -> Tensor:
    """
    Split an image into patches and embed each one linearly.

    Args:
        img: [B, 3, H, W] image batch
        embedding: PatchEmbedding holding the projection

    Returns:
        [B, H/p, W/p, D] token grid

    Raises:
        ValueError: If H or W is not divisible by the patch size
    """
    p = embedding.patch_size
    height, width = img.shape[-2:]
    if height % p or width % p:
        raise ValueError(f"image {height}x{width} is not divisible by patch size {p}; resize first")
    return embedding.proj(img).permute(0, 2, 3, 1)


def window_partition(x: Tensor, window: int) -> Tensor:
    """
    Cut a [B, H, W, C] grid into non-overlapping windows.

    Returns:
        [B * (H/w) * (W/w), w*w, C], windows in row-major order per image
    """
    batch, height, width, channels = x.shape
    if height % window or width % window:
        raise ValueError(f"grid {height}x{width} is not divisible by window {window}")
    x = x.view(batch, height // window, window, width // window, window, channels)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, channels)


def window_reverse(windows: Tensor, window: int, height: int, width: int) -> Tensor:
    """Inverse of window_partition."""
    channels = windows.shape[-1]
    batch = windows.shape[0] // ((height // window) * (width // window))
    x = windows.view(batch, height // window, width // window, window, window, channels)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(batch, height, width, channels)


@functools.lru_cache(maxsize=32)
def _region_mask(height: int, width: int, window: int, shift: int) -> Tensor:
    regions = torch.zeros((1, height, width, 1))
    slices = ((0, -window), (-window, -shift), (-shift, None))
    label = 0
    for h in slices:
        for w in slices:
            regions[:, h[0]:h[1], w[0]:w[1], :] = label
            label += 1
    labels = window_partition(regions, window).squeeze(-1)  # nW, N
    return labels.unsqueeze(1) != labels.unsqueeze(2)


def shifted_window_mask(height: int, width: int, window: int, shift: int) -> Tensor:
    """
    Attention mask for cyclically shifted windows.

    Returns:
        Bool tensor [nW, N, N]; True where query and key came from different
        regions of the unshifted grid and must not attend to each other
    """
    return _region_mask(height, width, window, shift)


class WindowAttention(nn.Module):
    """
    Multi-head self-attention inside one window, with optional relative position bias.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, relative_position_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"width {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        if relative_position_bias:
            self.relative_position_bias_table = nn.Parameter(
                torch.zeros((2 * window_size - 1) ** 2, num_heads))
            nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
            coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size),
                                                indexing='ij')).flatten(1)  # 2, N
            relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)  # N, N, 2
            relative = relative + (window_size - 1)
            index = relative[:, :, 0] * (2 * window_size - 1) + relative[:, :, 1]
            self.register_buffer('relative_position_index', index.flatten(), persistent=False)
        else:
            self.relative_position_bias_table = None

    def position_bias(self) -> Tensor:
        n = self.window_size * self.window_size
        bias = self.relative_position_bias_table[self.relative_position_index]
        return bias.view(n, n, -1).permute(2, 0, 1)  # heads, N, N

    def forward(self, windows: Tensor, mask: Tensor = None, return_attention: bool = False):
        """
        Args:
            windows: [B*nW, N, C] tokens, N = window_size**2
            mask: Optional bool [nW, N, N]; True entries are excluded
            return_attention: Also return the [B*nW, heads, N, N] weights

        Returns:
            [B*nW, N, C] tokens (and the attention weights if requested)
        """
        count, n, channels = windows.shape
        if n != self.window_size * self.window_size:
            raise ValueError(f"window holds {n} tokens, expected {self.window_size ** 2}")
        qkv = self.qkv(windows).reshape(count, n, 3, self.num_heads, channels // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.relative_position_bias_table is not None:
            attn = attn + self.position_bias().unsqueeze(0)
        if mask is not None:
            num_windows = mask.shape[0]
            attn = attn.view(count // num_windows, num_windows, self.num_heads, n, n)
            attn = attn.masked_fill(mask.to(attn.device)[None, :, None], float('-inf'))
            attn = attn.view(count, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(count, n, channels)
        out = self.proj(out)
        if return_attention:
            return out, attn
        return out


def w_msa(windows: Tensor, attention: WindowAttention, return_attention: bool = False):
    """Window attention core over already-partitioned windows."""
    return attention(windows, return_attention=return_attention)


def sw_msa(x: Tensor, attention: WindowAttention, shift: int = None, return_attention: bool = False):
    """
    Shifted-window attention over a [B, H, W, C] grid.

    The grid is rolled by (-shift, -shift), attended window by window with
    tokens masked off from regions they were not adjacent to before the
    roll, and rolled back. shift=0 is plain window attention.

    Args:
        x: Token grid
        attention: WindowAttention whose window_size partitions the grid
        shift: Roll distance, default window_size // 2

    Returns:
        [B, H, W, C] grid (and the attention weights if requested)
    """
    window = attention.window_size
    if shift is None:
        shift = window // 2
    _, height, width, _ = x.shape
    mask = None
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = shifted_window_mask(height, width, window, shift)
    result = attention(window_partition(x, window), mask=mask, return_attention=return_attention)
    out, weights = result if return_attention else (result, None)
    out = window_reverse(out, window, height, width)
    if shift:
        out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
    if return_attention:
        return out, weights
    return out


class SwinBlock(nn.Module):
    """Pre-norm attention and MLP sub-layers, each wrapped in a skip connection."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shift_size: int = 0,
                 mlp_ratio: float = 4.0, relative_position_bias: bool = True):
        super().__init__()
        self.shift_size = shift_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size, relative_position_bias)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def attention_half(self, z: Tensor) -> Tensor:
        return sw_msa(self.norm1(z), self.attn, self.shift_size) + z

    def forward(self, z: Tensor) -> Tensor:
        z_hat = self.attention_half(z)
        return self.mlp(self.norm2(z_hat)) + z_hat


def block_pair(f: Tensor, block_l: SwinBlock, block_l1: SwinBlock) -> Tensor:
    """
    Apply a regular-window block followed by a shifted-window block.

    Raises:
        ValueError: If block_l is shifted
    """
    if block_l.shift_size != 0:
        raise ValueError("the first block of a pair must use regular windows")
    return block_l1(block_l(f))


class PatchMerging(nn.Module):
    """Concatenate 2x2 token groups (4D channels) and project them to 2D channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return patch_merge(x, self)


def patch_merge(x: Tensor, merging: PatchMerging) -> Tensor:
    """
    Halve a [B, S, S, D] grid to [B, S/2, S/2, 2D].

    Raises:
        ValueError: If the side is odd
    """
    height, width = x.shape[1:3]
    if height % 2 or width % 2:
        raise ValueError(f"cannot merge an odd {height}x{width} grid")
    x0 = x[:, 0::2, 0::2, :]
    x1 = x[:, 1::2, 0::2, :]
    x2 = x[:, 0::2, 1::2, :]
    x3 = x[:, 1::2, 1::2, :]
    x = torch.cat([x0, x1, x2, x3], dim=-1)
    return merging.reduction(merging.norm(x))


class SwinStage(nn.Module):
    """Optional patch merge followed by `depth` blocks alternating regular and shifted windows."""

    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int, side: int,
                 mlp_ratio: float, relative_position_bias: bool, downsample: bool):
        super().__init__()
        self.merge = PatchMerging(dim // 2) if downsample else None
        # A window covering the whole map has nothing to shift across.
        shift = window_size // 2 if side > window_size else 0
        self.blocks = nn.ModuleList([
            SwinBlock(dim, num_heads, window_size, 0 if i % 2 == 0 else shift,
                      mlp_ratio, relative_position_bias)
            for i in range(depth)
        ])

    def forward(self, x: Tensor) -> Tensor:
        if self.merge is not None:
            x = self.merge(x)
        for block in self.blocks:
            x = block(x)
        return x


class SwinClassifier(nn.Module):
    """Four-stage shifted-window transformer with global pooling and a linear head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        dims = config.stage_dims()
        sides = config.stage_sides()
        self.patch_embed = PatchEmbedding(config.patch_size, config.embed_dim)
        self.embed_norm = nn.LayerNorm(config.embed_dim)
        self.stages = nn.ModuleList([
            SwinStage(dims[k], config.depths[k], config.heads[k], config.effective_window(k),
                      sides[k], config.mlp_ratio, config.relative_position_bias, downsample=k > 0)
            for k in range(4)
        ])
        self.norm = nn.LayerNorm(dims[-1])
        self.head = nn.Linear(dims[-1], config.num_classes)
        self.apply(_init_weights)

    def forward_features(self, x: Tensor) -> List[FeatureMap]:
        """Return the feature map after each stage."""
        z = self.embed_norm(self.patch_embed(x))
        maps = []
        for k, stage in enumerate(self.stages):
            z = stage(z)
            maps.append(FeatureMap(z, k + 1))
        return maps

    def forward(self, x: Tensor) -> Tensor:
        """
        Args:
            x: [B, 3, H, W] images already at config.input_size

        Returns:
            [B, num_classes] logits
        """
        z = self.forward_features(x)[-1].grid
        pooled = self.norm(z).mean(dim=(1, 2))
        return self.head(pooled)


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def prepare_batch(images: Sequence[np.ndarray], config: BackboneConfig) -> Tensor:
    """Resize H x W x 3 arrays to config.input_size (bilinear, no padding) and stack them."""
    tensors = [resize_tensor(to_tensor(img), config.input_size) for img in images]
    return torch.cat(tensors, dim=0)


@torch.no_grad()
def predict_proba(model: SwinClassifier, images: Sequence[np.ndarray], chunk: int = 64) -> Tensor:
    """Softmax probabilities [N, num_classes] for a list of images."""
    model.eval()
    outputs = []
    for start in range(0, len(images), chunk):
        batch = prepare_batch(images[start:start + chunk], model.config)
        outputs.append(model(batch).softmax(dim=-1))
    if not outputs:
        return torch.zeros((0, model.config.num_classes))
    return torch.cat(outputs)


def argmax_confidence(probs: Tensor) -> Tuple[int, float]:
    # torch.argmax returns the first maximal index, so ties go to the lowest code.
    code = int(torch.argmax(probs))
    return code, float(probs[code])


def classify(model: SwinClassifier, pixels: np.ndarray) -> Tuple[int, float]:
    """Return (class code, confidence) for one image."""
    return argmax_confidence(predict_proba(model, [pixels])[0])


def classify_chart_type(pixels: np.ndarray, model: SwinClassifier) -> Tuple[ChartType, float]:
    """
    Classify the chart type of a whole image.

    Raises:
        ModelError: If the model head is not 15-way
    """
    if model.config.num_classes != len(ChartType):
        raise ModelError(f"chart-type head has {model.config.num_classes} classes, expected {len(ChartType)}")
    code, confidence = classify(model, pixels)
    return ChartType(code), confidence


def classify_text_role(crop: np.ndarray, model: SwinClassifier) -> Tuple[TextRole, float]:
    """
    Classify the role of one (upscaled) text crop.

    Raises:
        ModelError: If the model head is not 9-way
    """
    if model.config.num_classes != len(TextRole):
        raise ModelError(f"text-role head has {model.config.num_classes} classes, expected {len(TextRole)}")
    code, confidence = classify(model, crop)
    return TextRole(code), confidence


class ChartTypeClassifier(ChartTypeStage):
    """Pipeline adapter around a trained chart-type SwinClassifier."""

    def __init__(self, model: SwinClassifier):
        self.model = model

    def classify(self, pixels, context):
        return classify_chart_type(self.check_pixels(pixels), self.model)


class TextRoleClassifier(RoleStage):
    """Pipeline adapter around a trained text-role SwinClassifier."""

    def __init__(self, model: SwinClassifier):
        self.model = model

    def classify_role(self, crop, context):
        return classify_text_role(self.check_pixels(crop), self.model)


@torch.no_grad()
def accuracy(model: SwinClassifier, inputs: Tensor, labels: Tensor, chunk: int = 64) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(labels), chunk):
        logits = model(inputs[start:start + chunk])
        correct += int((logits.argmax(dim=-1) == labels[start:start + chunk]).sum())
    model.train()
    return correct / max(1, len(labels))


def train_classifier(images: Sequence[np.ndarray], labels: Sequence[int], config: BackboneConfig,
                     schedule: TrainSchedule, validation=None, stage: str = 'classifier'):
    """
    Train a SwinClassifier from scratch with Adam and sparse cross-entropy.

    Args:
        images: H x W x 3 arrays in [0, 1]
        labels: Integer class codes, one per image
        config: Backbone configuration (num_classes sets the head)
        schedule: Optimization schedule; its seed fixes init and batch order
        validation: Optional (images, labels) pair scored after every epoch
        stage: Name recorded on the curve

    Returns:
        (trained model in eval mode, TrainingCurve)

    Raises:
        DataError: With fewer than two distinct classes or out-of-range labels
    """
    labels = [int(label) for label in labels]
    if len(images) != len(labels) or not labels:
        raise DataError("need the same, non-zero number of images and labels")
    if len(set(labels)) < 2:
        raise DataError("training a classifier needs at least 2 classes present")
    if max(labels) >= config.num_classes or min(labels) < 0:
        raise DataError(f"labels must lie in [0, {config.num_classes})")

    generator = seed_everything(schedule.seed)
    model = SwinClassifier(config)
    model.train()
    optimizer = make_optimizer(model.parameters(), schedule)

    inputs = prepare_batch(images, config)
    targets = torch.tensor(labels, dtype=torch.long)
    val_inputs = val_targets = None
    if validation is not None and len(validation[0]):
        val_inputs = prepare_batch(validation[0], config)
        val_targets = torch.tensor([int(v) for v in validation[1]], dtype=torch.long)

    curve = TrainingCurve(stage)
    steps = batch_order(len(labels), schedule, generator)
    for step, indices, epoch_finished in progress(steps, stage):
        logits = model(inputs[indices])
        loss = F.cross_entropy(logits, targets[indices])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.losses.append(float(loss))
        log_step(stage, step, float(loss))
        if epoch_finished:
            curve.train_accuracy.append(accuracy(model, inputs, targets))
            if val_inputs is not None:
                curve.val_accuracy.append(accuracy(model, val_inputs, val_targets))

    model.eval()
    return model, curve
