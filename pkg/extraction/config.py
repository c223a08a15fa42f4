"""
config.py - Stage configurations and the INI config-file loader

Every configuration is an immutable dataclass, validated on construction,
with with_* helpers that return modified copies. A config file is INI text
with one section per configuration; see roles-and-types.md for the keys.
"""

import configparser
import string
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional, Tuple

from .core.vocab import ChartType, SYNTHETIC_CHART_TYPES
from .errors import UsageError

DEFAULT_CHARSET = string.digits + string.ascii_uppercase + string.ascii_lowercase + ' .,%-+()/'


@dataclass(frozen=True)
class BackboneConfig:
    """
    Hierarchical shifted-window transformer settings.

    Attributes:
        input_size: (H, W) in pixels; images are resized to this, H must equal W
        patch_size: Side of the square patches embedded as tokens
        embed_dim: Token width in stage 1; doubled by every patch merge
        depths: Transformer blocks per stage (four stages)
        heads: Attention heads per stage
        window_size: Side of the attention windows
        mlp_ratio: Hidden width of the block MLP relative to the token width
        num_classes: Size of the classification head
        relative_position_bias: Add the learned relative position bias to attention
    """

    input_size: Tuple[int, int] = (64, 64)
    patch_size: int = 4
    embed_dim: int = 32
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    heads: Tuple[int, ...] = (2, 2, 4, 4)
    window_size: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 15
    relative_position_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'input_size', tuple(self.input_size))
        object.__setattr__(self, 'depths', tuple(self.depths))
        object.__setattr__(self, 'heads', tuple(self.heads))
        height, width = self.input_size
        if height != width:
            raise UsageError(f"backbone input must be square, got {height}x{width}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise UsageError("depths and heads need exactly 4 entries")
        if height % self.patch_size:
            raise UsageError(f"input side {height} is not divisible by patch size {self.patch_size}")
        if self.num_classes < 2:
            raise UsageError("a classifier needs at least 2 classes")
        for stage, side in enumerate(self.stage_sides()):
            window = self.effective_window(stage)
            if side < 1 or side % window:
                raise UsageError(
                    f"stage {stage + 1} feature side {side} is not divisible by window {window}")
            if self.stage_dims()[stage] % self.heads[stage]:
                raise UsageError(f"stage {stage + 1} width is not divisible by its head count")

    def stage_sides(self):
        """Feature-map side per stage: input_side / patch_size / 2**(k-1)."""
        first = self.input_size[0] // self.patch_size
        return [first // (2 ** k) for k in range(4)]

    def stage_dims(self):
        return [self.embed_dim * (2 ** k) for k in range(4)]

    def effective_window(self, stage: int) -> int:
        # Windows never exceed the feature map; such stages attend globally.
        return min(self.window_size, self.stage_sides()[stage])

    def with_num_classes(self, num_classes: int) -> 'BackboneConfig':
        return replace(self, num_classes=num_classes)


@dataclass(frozen=True)
class DetectorConfig:
    """
    One-stage grid text detector settings.

    Attributes:
        input_size: (H, W) the image is resized to before detection
        grid_sizes: Cells per side at each scale, finest first
        anchors: Per-scale (w, h) anchor priors in input pixels
        confidence_threshold: Minimum objectness (exclusive) for a detection
        nms_iou_threshold: IoU above which NMS suppresses the weaker box
        merge_gap_threshold: Vertical gap, in median heights, bridged by block merging
        channels: Width of the first convolution; doubled per downsampling
        zero_init_head: Start the prediction heads at zero (objectness 0.5 everywhere)
    """

    input_size: Tuple[int, int] = (192, 192)
    grid_sizes: Tuple[int, ...] = (24, 12)
    anchors: Tuple[Tuple[Tuple[int, int], ...], ...] = (((14, 8), (32, 10)), ((56, 12), (96, 16)))
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.5
    merge_gap_threshold: float = 0.5
    channels: int = 16
    zero_init_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'input_size', tuple(self.input_size))
        object.__setattr__(self, 'grid_sizes', tuple(self.grid_sizes))
        object.__setattr__(self, 'anchors', tuple(tuple(tuple(a) for a in scale) for scale in self.anchors))
        if not self.grid_sizes:
            raise UsageError("detector needs at least one scale")
        if len(self.anchors) != len(self.grid_sizes):
            raise UsageError("detector needs one anchor list per scale")
        if len({len(scale) for scale in self.anchors}) != 1 or not self.anchors[0]:
            raise UsageError("every scale needs the same, non-zero number of anchors")
        for name in ('confidence_threshold', 'nms_iou_threshold'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise UsageError(f"{name} must lie in (0, 1), got {value}")
        height, width = self.input_size
        for grid in self.grid_sizes:
            if height % grid or width % grid or height // grid != width // grid:
                raise UsageError(f"grid {grid} does not tile the {height}x{width} input")
            stride = height // grid
            if stride < 2 or stride & (stride - 1):
                raise UsageError(f"grid {grid} implies stride {stride}, which is not a power of two")

    @property
    def anchors_per_scale(self) -> int:
        return len(self.anchors[0])

    def strides(self):
        return [self.input_size[0] // grid for grid in self.grid_sizes]

    def with_anchors(self, anchors) -> 'DetectorConfig':
        return replace(self, anchors=anchors)


@dataclass(frozen=True)
class SRConfig:
    """
    Text-crop super-resolution settings.

    Attributes:
        num_rrdb_blocks: Residual-in-residual dense blocks in the trunk
        growth_channels: Channels added by each dense convolution
        base_channels: Trunk width
        native_scale: Integer factor the generator is trained at (2 or 4)
        outscale: Deployment factor; output is resampled to ceil(dim * outscale)
        lambda_adv: Weight of the relativistic adversarial term
        eta_l1: Weight of the pixel 1-norm term
        global_skip: Add a bilinear upsampling of the input to the generator output
        discriminator_channels: Width of the first discriminator convolution
    """

    num_rrdb_blocks: int = 4
    growth_channels: int = 16
    base_channels: int = 32
    native_scale: int = 2
    outscale: float = 1.5
    lambda_adv: float = 0.005
    eta_l1: float = 0.01
    global_skip: bool = True
    discriminator_channels: int = 32

    def __post_init__(self):
        if self.native_scale not in (2, 4):
            raise UsageError(f"native_scale must be 2 or 4, got {self.native_scale}")
        if self.outscale <= 0:
            raise UsageError(f"outscale must be positive, got {self.outscale}")
        if self.num_rrdb_blocks < 1:
            raise UsageError("the generator needs at least one RRDB block")
        if self.lambda_adv < 0 or self.eta_l1 < 0:
            raise UsageError("loss coefficients must be non-negative")

    def with_outscale(self, outscale: float) -> 'SRConfig':
        return replace(self, outscale=outscale)


@dataclass(frozen=True)
class RecognizerConfig:
    """
    Attention text recognizer settings.

    Attributes:
        charset: Ordered characters the decoder can emit
        max_length: Longest transcript, in characters
        num_fiducial: TPS control points (even, at least 6)
        image_size: (H, W) of the normalized text frame
        hidden_size: Width of the recurrent layers
        channels: Widths of the three residual stages
    """

    charset: str = DEFAULT_CHARSET
    max_length: int = 32
    num_fiducial: int = 20
    image_size: Tuple[int, int] = (32, 100)
    hidden_size: int = 64
    channels: Tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, 'image_size', tuple(self.image_size))
        object.__setattr__(self, 'channels', tuple(self.channels))
        if len(set(self.charset)) != len(self.charset) or not self.charset:
            raise UsageError("charset must be non-empty with distinct characters")
        if self.num_fiducial < 6 or self.num_fiducial % 2:
            raise UsageError(f"num_fiducial must be even and >= 6, got {self.num_fiducial}")
        if self.max_length < 1:
            raise UsageError("max_length must be positive")
        height, width = self.image_size
        if height % 8 or width % 4:
            raise UsageError(f"normalized size {height}x{width} needs H % 8 == 0 and W % 4 == 0")
        if len(self.channels) != 3:
            raise UsageError("channels needs 3 entries")

    @property
    def num_steps(self) -> int:
        """Feature sequence length T."""
        return self.image_size[1] // 4


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Synthetic chart corpus settings.

    Attributes:
        chart_types: Chart types to draw, allocated round-robin
        count: Number of images
        image_size: (H, W) in pixels
        font_sizes: (min, max) font size in pixels, inclusive
        seed: Seed; identical seeds give byte-identical images
    """

    chart_types: Tuple[ChartType, ...] = SYNTHETIC_CHART_TYPES
    count: int = 100
    image_size: Tuple[int, int] = (192, 192)
    font_sizes: Tuple[int, int] = (6, 14)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'chart_types', tuple(ChartType(c) for c in self.chart_types))
        object.__setattr__(self, 'image_size', tuple(self.image_size))
        object.__setattr__(self, 'font_sizes', tuple(self.font_sizes))
        if self.count < 1:
            raise UsageError("count must be at least 1")
        if not self.chart_types:
            raise UsageError("chart_types must not be empty")
        unsupported = [c.label for c in self.chart_types if c not in SYNTHETIC_CHART_TYPES]
        if unsupported:
            raise UsageError(f"the generator cannot draw: {', '.join(unsupported)}")
        low, high = self.font_sizes
        if low < 5 or high < low:
            raise UsageError(f"font_sizes must satisfy 5 <= min <= max, got {self.font_sizes}")

    def with_seed(self, seed: int) -> 'SyntheticSpec':
        return replace(self, seed=seed)


@dataclass(frozen=True)
class TrainSchedule:
    """
    Optimization schedule shared by every trainer.

    Attributes:
        steps: Optimizer steps (main phase)
        batch_size: Samples per step
        learning_rate: Adam learning rate
        beta1: Adam first-moment decay (the "momentum")
        weight_decay: L2 penalty
        pretrain_steps: Steps of the pixel-loss warm-up phase (super-resolution only)
        seed: Seed for initialization and batch order
    """

    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    weight_decay: float = 0.0
    pretrain_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.pretrain_steps < 0:
            raise UsageError("step counts must be non-negative")
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")

    def with_seed(self, seed: int) -> 'TrainSchedule':
        return replace(self, seed=seed)

    def with_steps(self, steps: int) -> 'TrainSchedule':
        return replace(self, steps=steps)


# Stage-specific schedule defaults.
DEFAULT_SCHEDULES = {
    'chart-type': TrainSchedule(steps=400),
    'detector': TrainSchedule(steps=1500, batch_size=4, weight_decay=0.0005),
    'sr': TrainSchedule(steps=300, batch_size=16, learning_rate=2e-4, pretrain_steps=500),
    'recognizer': TrainSchedule(steps=2000, batch_size=32),
    'text-role': TrainSchedule(steps=600, batch_size=32),
}


@dataclass(frozen=True)
class ConfigSet:
    """All stage configurations of one run."""

    chart_type: BackboneConfig = BackboneConfig(num_classes=len(ChartType))
    text_role: BackboneConfig = BackboneConfig(num_classes=9)
    detector: DetectorConfig = DetectorConfig()
    upscaler: SRConfig = SRConfig()
    recognizer: RecognizerConfig = RecognizerConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    schedules: Dict[str, TrainSchedule] = field(default_factory=lambda: dict(DEFAULT_SCHEDULES))

    def schedule(self, stage: str, seed: Optional[int] = None) -> TrainSchedule:
        schedule = self.schedules.get(stage, TrainSchedule())
        return schedule.with_seed(seed) if seed is not None else schedule


_SECTIONS = {
    'chart_type': BackboneConfig,
    'text_role': BackboneConfig,
    'detector': DetectorConfig,
    'upscaler': SRConfig,
    'recognizer': RecognizerConfig,
    'synthetic': SyntheticSpec,
}


def load_config(path: str) -> ConfigSet:
    """
    Read an INI config file into a ConfigSet.

    Sections missing from the file keep their defaults. A [train] section sets
    the schedule shared by every stage; [train.<stage>] sections override it
    for one stage.

    Args:
        path: Path to the config file

    Returns:
        ConfigSet

    Raises:
        UsageError: On unknown sections, unknown keys or unparsable values
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> ConfigSet:
    defaults = ConfigSet()
    values = {}
    for name, cls in _SECTIONS.items():
        if parser.has_section(name):
            base = getattr(defaults, name)
            values[name] = _build(cls, parser[name], base)

    schedules = dict(DEFAULT_SCHEDULES)
    shared = parser['train'] if parser.has_section('train') else None
    for stage, base in DEFAULT_SCHEDULES.items():
        if shared is not None:
            base = _build(TrainSchedule, shared, base)
        section = f'train.{stage}'
        if parser.has_section(section):
            base = _build(TrainSchedule, parser[section], base)
        schedules[stage] = base

    known = set(_SECTIONS) | {'train'} | {f'train.{stage}' for stage in DEFAULT_SCHEDULES}
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(unknown)}")
    return replace(defaults, schedules=schedules, **values)


def _build(cls, section, base):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    updates = {}
    for key, raw in section.items():
        if key not in names:
            raise UsageError(f"[{section.name}] unknown key {key!r}")
        try:
            updates[key] = _coerce(raw, hints[key])
        except (TypeError, ValueError) as e:
            if isinstance(e, UsageError):
                raise
            raise UsageError(f"[{section.name}] bad value for {key}: {raw!r} ({e})") from e
    return replace(base, **updates)


def _coerce(raw: str, hint):
    raw = raw.strip()
    if hint is bool:
        lowered = raw.lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError("expected a boolean")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        # Quotes preserve leading or trailing spaces, as in a charset.
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in '"\'':
            return raw[1:-1]
        return raw

    args = typing.get_args(hint)
    if args == (ChartType, Ellipsis):
        return tuple(ChartType.from_label(item) for item in _split(raw, ','))
    if args == (int, int):
        parts = _split(raw.replace('x', ','), ',')
        if len(parts) != 2:
            raise ValueError("expected two integers such as 64x64")
        return tuple(int(p) for p in parts)
    if args == (int, Ellipsis):
        return tuple(int(p) for p in _split(raw, ','))
    if args and typing.get_origin(args[0]) is tuple:
        # Anchors: scales separated by '|', anchors by spaces, w:h pairs.
        scales = []
        for scale in _split(raw, '|'):
            scales.append(tuple(tuple(int(v) for v in pair.split(':')) for pair in scale.split()))
        return tuple(scales)
    raise ValueError(f"unsupported field type {hint}")


def _split(raw: str, sep: str):
    return [part.strip() for part in raw.split(sep) if part.strip()]
