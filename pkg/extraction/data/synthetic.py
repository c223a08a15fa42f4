"""
Synthetic chart generator with exact text ground truth.

Charts of the four supported types are drawn with Pillow's bundled font at
small sizes. Every text span is placed by its ink box, so the recorded box
is exactly the inked area, and spans are kept on a plain white background
so each one can be re-rendered in isolation pixel for pixel.

Role assignments:
    chart-title     one or two lines centered at the top (two lines form one block)
    axis-title      above the y axis and below the x tick labels
    tick-label      numbers or categories along both axes
    tick-grouping   an occasional group caption under the category ticks
    legend-title    optional heading above the legend
    legend-label    one per series when there is more than one series
    value-label     the value printed at the end of a bar
    mark-label      a word next to a highlighted line or scatter point
    other           footnote-style strings in the bottom-left corner
"""

import functools
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from ..common import save_image
from ..config import SyntheticSpec
from ..core.geometry import BBox
from ..core.records import LabeledImage, TextBlock
from ..core.vocab import ChartType, TextRole
from ..errors import LayoutError
from .annotations import save_annotation

logger = logging.getLogger(__name__)

TITLE_WORDS = ['Annual', 'Sales', 'Growth', 'Revenue', 'Survey', 'Results', 'Energy', 'Usage',
               'Market', 'Share', 'Yield', 'Trend', 'Budget', 'Traffic', 'Income', 'Rates']
AXIS_WORDS = ['Count', 'Value', 'Year', 'Score', 'Units', 'Percent', 'Time', 'Amount', 'Index', 'Size']
CATEGORY_WORDS = ['North', 'South', 'East', 'West', 'Alpha', 'Beta', 'Gamma', 'Delta', 'Q1', 'Q2', 'Q3',
                  'Q4', 'Mon', 'Tue', 'Wed', 'Thu', 'Fri', 'A', 'B', 'C', 'D', 'E']
LEGEND_WORDS = ['Group A', 'Group B', 'Control', 'Treated', 'Male', 'Female', 'Urban', 'Rural', 'Old', 'New']
LEGEND_TITLES = ['Legend', 'Series', 'Groups', 'Type']
MARK_WORDS = ['peak', 'low', 'max', 'min', 'outlier', 'start', 'end']
GROUP_WORDS = ['Region', 'Quarter', 'Phase 1', 'Phase 2', 'Batch']
FOOTNOTES = ['Source (2019)', 'Note. values in %', 'Data from survey', 'n 40', 'Adapted from report']

SERIES_COLORS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14)]
TEXT_COLOR = (0, 0, 0)
WHITE = (255, 255, 255)
MARGIN = 2
AXIS_PAD = 3
# Horizontal clearance between side-by-side spans.
CLEARANCE = 2


@functools.lru_cache(maxsize=None)
def _font(size: int):
    return ImageFont.load_default(size=size)


@dataclass(frozen=True)
class TextSpan:
    """
    One ground-truth block as drawn.

    Attributes:
        role: Text role
        lines: (text, draw origin) per rendered line
        font_size: Font size in pixels
        box: Union of the ink boxes of all lines
    """

    role: TextRole
    lines: Tuple[Tuple[str, Tuple[int, int]], ...]
    font_size: int
    box: BBox

    @property
    def transcript(self) -> str:
        return ' '.join(text for text, _ in self.lines)


def measure(text: str, size: int):
    """Ink box of text drawn at the origin: (left, top, width, height)."""
    left, top, right, bottom = _font(size).getbbox(text)
    return left, top, right - left, bottom - top


def draw_text_span(draw: ImageDraw.ImageDraw, span: TextSpan):
    for text, origin in span.lines:
        draw.text(origin, text, fill=TEXT_COLOR, font=_font(span.font_size))


def render_span(span: TextSpan, image_size: Tuple[int, int]) -> np.ndarray:
    """Render one span alone on a white canvas of image_size (H, W)."""
    height, width = image_size
    image = Image.new('RGB', (width, height), WHITE)
    draw_text_span(ImageDraw.Draw(image), span)
    return np.asarray(image, dtype=np.float32) / 255.0


class _Canvas:
    """Drawing surface that records text spans and refuses overlapping optional text."""

    def __init__(self, image_size, font_sizes, rng):
        self.height, self.width = image_size
        self.low, self.high = font_sizes
        self.rng = rng
        self.image = Image.new('RGB', (self.width, self.height), WHITE)
        self.draw = ImageDraw.Draw(self.image)
        self.spans: List[TextSpan] = []
        # Separate blocks stay further apart than the detector's merge gap.
        self.sep = int(math.ceil(0.6 * self.high)) + 1

    def size(self, small=False, large=False) -> int:
        if small:
            return int(self.rng.integers(self.low, min(self.high, self.low + 2) + 1))
        if large:
            return int(self.rng.integers((self.low + self.high + 1) // 2, self.high + 1))
        return int(self.rng.integers(self.low, self.high + 1))

    def span(self, role, lines, size, x, y, line_gap=1) -> TextSpan:
        """Lay out lines with their ink boxes' top-left corner at (x, y), left aligned."""
        placed = []
        box = None
        for text in lines:
            left, top, w, h = measure(text, size)
            line_box = BBox(x, y, x + w, y + h)
            box = line_box if box is None else box.union(line_box)
            placed.append((text, (x - left, y - top)))
            y += h + line_gap
        return TextSpan(role, tuple(placed), size, box)

    def fits(self, span: TextSpan) -> bool:
        """
        A span fits when it lies inside the image on white pixels and keeps
        clear of earlier spans: CLEARANCE pixels side by side, sep pixels
        when stacked.
        """
        box = span.box
        if not box.within(self.width, self.height):
            return False
        for other in self.spans:
            o = other.box
            if (box.x_min < o.x_max + CLEARANCE and o.x_min < box.x_max + CLEARANCE
                    and box.y_min < o.y_max + self.sep and o.y_min < box.y_max + self.sep):
                return False
        x0, y0 = max(0, int(box.x_min) - 1), max(0, int(box.y_min) - 1)
        x1 = min(self.width, int(math.ceil(box.x_max)) + 1)
        y1 = min(self.height, int(math.ceil(box.y_max)) + 1)
        return bool((np.asarray(self.image.crop((x0, y0, x1, y1))) == 255).all())

    def put(self, span: TextSpan, optional=False) -> Optional[TextSpan]:
        """Draw a span; optional spans that do not fit are skipped, mandatory ones raise."""
        if not self.fits(span):
            if optional:
                return None
            raise LayoutError(f"layout infeasible: cannot place {span.role.label} {span.transcript!r}")
        draw_text_span(self.draw, span)
        self.spans.append(span)
        return span


def _words(rng, pool, low, high):
    count = int(rng.integers(low, high + 1))
    return ' '.join(rng.choice(pool, size=count, replace=False).tolist())


@dataclass(frozen=True)
class _NumberAxis:
    """Evenly stepped numeric axis starting at zero."""

    step: float
    count: int
    percent: bool = False
    decimals: int = 0

    @classmethod
    def random(cls, rng, low, high):
        count = int(rng.integers(low, high + 1))
        style = int(rng.integers(0, 3))
        if style == 1:
            return cls(step=float(rng.choice([5, 10, 20, 25])), count=count, percent=True)
        if style == 2:
            return cls(step=float(rng.choice([0.1, 0.2, 0.5])), count=count, decimals=1)
        return cls(step=float(rng.choice([1, 2, 5, 10, 20, 50, 100, 250])), count=count)

    @property
    def top(self):
        return self.step * (self.count - 1)

    def text(self, value):
        if self.decimals:
            return f'{value:.{self.decimals}f}'
        return f'{int(round(value))}%' if self.percent else f'{int(round(value))}'

    def labels(self):
        return [self.text(self.step * i) for i in range(self.count)]

    def with_count(self, count):
        return _NumberAxis(self.step, count, self.percent, self.decimals)


def _fit_labels(axis, max_count):
    """Shrink an axis (numeric or category list) to at most max_count labels."""
    if isinstance(axis, _NumberAxis):
        axis = axis.with_count(min(axis.count, max_count))
        return axis, axis.labels()
    labels = list(axis)[:max_count]
    return labels, labels


@dataclass
class _Frame:
    left: int
    top: int
    right: int
    bottom: int

    @property
    def width(self):
        return self.right - self.left

    @property
    def height(self):
        return self.bottom - self.top


@dataclass
class _Axes:
    frame: _Frame
    x_axis: object
    y_axis: object
    x_positions: List[float]
    y_positions: List[float]


def _even_positions(start, end, count):
    if count == 1:
        return [(start + end) / 2.0]
    return [start + (end - start) * i / (count - 1) for i in range(count)]


def _labels_of(axis):
    return axis.labels() if isinstance(axis, _NumberAxis) else list(axis)


def _layout_frame(c: _Canvas, series: Sequence[str], x_axis, y_axis, categories_on_x: bool,
                  right_room: int = 0, top_room: int = 0) -> _Axes:
    """
    Place the chart furniture around the plot area.

    Draws title, axis titles, tick labels on both axes, legend, optional
    tick grouping and optional footnote, then the two axis lines. Axes are
    thinned to the number of labels that fit.

    Args:
        series: Series names; a legend is drawn for two or more
        x_axis, y_axis: _NumberAxis or list of category names
        categories_on_x: Center x labels in equal slots instead of on an even grid
        right_room: Pixels kept free right of the plot (bar value labels)
        top_room: Pixels kept free above the plot (bar value labels)

    Raises:
        LayoutError: If the plot area or the axes do not fit
    """
    rng = c.rng
    tick_size = c.size(small=True)

    # top: title, then the y-axis title
    title_size = c.size(large=True)
    if rng.random() < 0.25:
        lines = [_words(rng, TITLE_WORDS, 1, 2), _words(rng, TITLE_WORDS, 1, 2)]
    else:
        lines = [_words(rng, TITLE_WORDS, 1, 3)]
    width = max(measure(line, title_size)[2] for line in lines)
    title = c.put(c.span(TextRole.CHART_TITLE, lines, title_size, max(MARGIN, (c.width - width) // 2), MARGIN))
    y = int(math.ceil(title.box.y_max)) + c.sep

    axis_size = c.size()
    y_title = c.put(c.span(TextRole.AXIS_TITLE, [str(rng.choice(AXIS_WORDS))], axis_size, MARGIN, y))
    top = int(math.ceil(y_title.box.y_max)) + c.sep + top_room

    # bottom, upwards: footnote, x-axis title, tick grouping, x tick labels
    bottom = c.height - MARGIN
    footnote = None
    if rng.random() < 0.2:
        size = c.size(small=True)
        text = str(rng.choice(FOOTNOTES))
        h = measure(text, size)[3]
        footnote = (text, size, bottom - h)
        bottom -= h + c.sep
    x_title_text = str(rng.choice(AXIS_WORDS))
    _, _, x_title_w, x_title_h = measure(x_title_text, axis_size)
    x_title_y = bottom - x_title_h
    bottom = x_title_y - c.sep
    grouping = None
    if categories_on_x and rng.random() < 0.1:
        size = c.size(small=True)
        text = str(rng.choice(GROUP_WORDS))
        h = measure(text, size)[3]
        grouping = (text, size, bottom - h)
        bottom -= h + c.sep
    x_tick_h = max(measure(t, tick_size)[3] for t in _labels_of(x_axis))
    x_tick_y = bottom - x_tick_h
    plot_bottom = x_tick_y - AXIS_PAD

    # sides: y tick labels on the left, legend on the right
    plot_left = MARGIN + max(measure(t, tick_size)[2] for t in _labels_of(y_axis)) + AXIS_PAD + 1
    legend_size = c.size(small=True)
    legend_title = None
    legend_w = 0
    if len(series) > 1:
        swatch = measure('Ag', legend_size)[3]
        legend_w = max(measure(s, legend_size)[2] for s in series) + swatch + AXIS_PAD
        if rng.random() < 0.5:
            legend_title = str(rng.choice(LEGEND_TITLES))
            legend_w = max(legend_w, measure(legend_title, legend_size)[2])
    plot_right = c.width - MARGIN - (legend_w + c.sep if legend_w else 0) - right_room

    frame = _Frame(plot_left, top, plot_right, plot_bottom)
    if frame.width < 40 or frame.height < 30:
        raise LayoutError(f"layout infeasible: plot area {frame.width}x{frame.height} in a "
                          f"{c.width}x{c.height} image")

    # y tick labels, right aligned, at least one line plus sep apart
    y_tick_h = max(measure(t, tick_size)[3] for t in _labels_of(y_axis))
    y_start, y_end = frame.bottom - y_tick_h // 2 - 2, frame.top + y_tick_h // 2 + 1
    y_fit = int((y_start - y_end) // (y_tick_h + c.sep)) + 1
    if y_fit < 2:
        raise LayoutError("layout infeasible: y tick labels do not fit")
    y_axis, y_labels = _fit_labels(y_axis, y_fit)
    y_positions = _even_positions(y_start, y_end, len(y_labels))
    for text, yc in zip(y_labels, y_positions):
        _, _, w, h = measure(text, tick_size)
        c.put(c.span(TextRole.TICK_LABEL, [text], tick_size, frame.left - AXIS_PAD - 1 - w, int(round(yc - h / 2))))

    # x tick labels, centered under their positions
    x_tick_w = max(measure(t, tick_size)[2] for t in _labels_of(x_axis))
    if categories_on_x:
        x_fit = int(frame.width // (x_tick_w + 4))
        x_axis, x_labels = _fit_labels(x_axis, x_fit)
        step = frame.width / max(1, len(x_labels))
        x_positions = [frame.left + step * (i + 0.5) for i in range(len(x_labels))]
    else:
        x_start, x_end = frame.left + x_tick_w // 2 + 4, frame.right - x_tick_w // 2 - 1
        x_fit = int((x_end - x_start) // (x_tick_w + 4)) + 1
        x_axis, x_labels = _fit_labels(x_axis, x_fit)
        x_positions = _even_positions(x_start, x_end, len(x_labels))
    if len(x_labels) < 2:
        raise LayoutError("layout infeasible: x tick labels do not fit")
    for text, xc in zip(x_labels, x_positions):
        w = measure(text, tick_size)[2]
        c.put(c.span(TextRole.TICK_LABEL, [text], tick_size, int(round(xc - w / 2)), x_tick_y))

    if grouping is not None:
        text, size, gy = grouping
        w = measure(text, size)[2]
        c.put(c.span(TextRole.TICK_GROUPING, [text], size, frame.left + max(0, (frame.width - w) // 2), gy),
              optional=True)
    c.put(c.span(TextRole.AXIS_TITLE, [x_title_text], axis_size,
                 frame.left + max(0, (frame.width - x_title_w) // 2), x_title_y))
    if footnote is not None:
        text, size, fy = footnote
        c.put(c.span(TextRole.OTHER, [text], size, MARGIN, fy), optional=True)

    # legend: optional title, then one swatch + label per series
    if len(series) > 1:
        lx = c.width - MARGIN - legend_w
        ly = frame.top
        if legend_title is not None:
            span = c.put(c.span(TextRole.LEGEND_TITLE, [legend_title], legend_size, lx, ly))
            ly = int(math.ceil(span.box.y_max)) + c.sep
        swatch = measure('Ag', legend_size)[3]
        for color, name in zip(SERIES_COLORS, series):
            span = c.put(c.span(TextRole.LEGEND_LABEL, [name], legend_size, lx + swatch + AXIS_PAD, ly))
            top_y = int(span.box.y_min)
            c.draw.rectangle([lx, top_y, lx + swatch - 1, top_y + max(1, int(span.box.height)) - 1], fill=color)
            ly = int(math.ceil(span.box.y_max)) + c.sep

    c.draw.line([(frame.left, frame.top), (frame.left, frame.bottom)], fill=TEXT_COLOR)
    c.draw.line([(frame.left, frame.bottom), (frame.right, frame.bottom)], fill=TEXT_COLOR)
    return _Axes(frame, x_axis, y_axis, x_positions, y_positions)


def _series_names(rng, low, high):
    count = int(rng.integers(low, high + 1))
    if count == 1:
        return ['']
    return rng.choice(LEGEND_WORDS, size=count, replace=False).tolist()


def _categories(rng):
    return rng.choice(CATEGORY_WORDS, size=int(rng.integers(3, 6)), replace=False).tolist()


def _draw_vertical_bar(c: _Canvas):
    rng = c.rng
    axes = _layout_frame(c, [''], _categories(rng), _NumberAxis.random(rng, 3, 5),
                         categories_on_x=True, top_room=c.high + 3)
    frame, numbers = axes.frame, axes.y_axis
    y_zero, y_top = axes.y_positions[0], axes.y_positions[-1]
    bar_w = max(3, int(frame.width / len(axes.x_positions) * 0.6))
    size = c.size(small=True)
    bars = []
    for xc in axes.x_positions:
        value = float(rng.uniform(0.15, 1.0)) * numbers.top
        y = y_zero - (y_zero - y_top) * value / numbers.top
        box = [int(xc - bar_w / 2), int(y), int(xc + bar_w / 2), frame.bottom - 1]
        c.draw.rectangle(box, fill=SERIES_COLORS[0])
        bars.append((xc, box[1], value))
    if rng.random() < 0.6:
        for xc, bar_top, value in bars:
            text = numbers.text(value)
            _, _, w, h = measure(text, size)
            c.put(c.span(TextRole.VALUE_LABEL, [text], size, int(round(xc - w / 2)), bar_top - h - 2), optional=True)


def _draw_horizontal_bar(c: _Canvas):
    rng = c.rng
    numbers = _NumberAxis.random(rng, 3, 5)
    size = c.size(small=True)
    value_room = measure(numbers.text(numbers.top), size)[2] + 4
    axes = _layout_frame(c, [''], numbers, _categories(rng), categories_on_x=False, right_room=value_room)
    frame, numbers = axes.frame, axes.x_axis
    x_zero, x_top = axes.x_positions[0], axes.x_positions[-1]
    ys = axes.y_positions
    spacing = abs(ys[0] - ys[1]) if len(ys) > 1 else frame.height
    bar_h = max(3, int(spacing * 0.6))
    show_values = rng.random() < 0.6
    for yc in ys:
        value = float(rng.uniform(0.15, 1.0)) * numbers.top
        x = x_zero + (x_top - x_zero) * value / numbers.top
        box = [frame.left + 1, int(yc - bar_h / 2), max(frame.left + 2, int(x)), int(yc + bar_h / 2)]
        c.draw.rectangle(box, fill=SERIES_COLORS[0])
        if show_values:
            text = numbers.text(value)
            h = measure(text, size)[3]
            c.put(c.span(TextRole.VALUE_LABEL, [text], size, box[2] + 3, int(round(yc - h / 2))), optional=True)


def _mark_label(c: _Canvas, point, size):
    text = str(c.rng.choice(MARK_WORDS))
    _, _, w, h = measure(text, size)
    x, y = point
    for dx, dy in ((4, -h - 4), (4, 4), (-w - 4, -h - 4), (-w - 4, 4)):
        if c.put(c.span(TextRole.MARK_LABEL, [text], size, int(x + dx), int(y + dy)), optional=True):
            return


def _draw_series(c: _Canvas, scatter: bool):
    rng = c.rng
    series = _series_names(rng, 1, 3)
    start = int(rng.choice([0, 1, 2000, 2010]))
    step = int(rng.choice([1, 2, 5]))
    years = [str(start + step * i) for i in range(int(rng.integers(4, 7)))]
    axes = _layout_frame(c, series, years, _NumberAxis.random(rng, 3, 5), categories_on_x=False)
    xs_grid = axes.x_positions
    y_zero, y_top = axes.y_positions[0], axes.y_positions[-1]
    first = None
    for color, _ in zip(SERIES_COLORS, series):
        if scatter:
            xs = rng.uniform(xs_grid[0], xs_grid[-1], size=int(rng.integers(8, 16)))
        else:
            xs = np.array(xs_grid)
        ys = y_zero - (y_zero - y_top) * rng.uniform(0.05, 1.0, size=len(xs))
        points = [(float(x), float(y)) for x, y in zip(xs, ys)]
        if scatter:
            for x, y in points:
                c.draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
        else:
            c.draw.line(points, fill=color, width=2)
        first = first or points
    if rng.random() < 0.5:
        highlight = first[int(np.argmin([p[1] for p in first]))]
        _mark_label(c, highlight, c.size(small=True))


_DRAWERS = {
    ChartType.VERTICAL_BAR: _draw_vertical_bar,
    ChartType.HORIZONTAL_BAR: _draw_horizontal_bar,
    ChartType.LINE: lambda c: _draw_series(c, scatter=False),
    ChartType.SCATTER: lambda c: _draw_series(c, scatter=True),
}


def generate_chart(spec: SyntheticSpec, index: int) -> Tuple[LabeledImage, Tuple[TextSpan, ...]]:
    """
    Draw chart number index of a synthetic corpus.

    The chart type is spec.chart_types[index % len(spec.chart_types)] and
    all randomness comes from a generator seeded with (spec.seed, index).

    Returns:
        (LabeledImage, the spans drawn, in drawing order)

    Raises:
        LayoutError: If the image is too small for the mandatory elements
    """
    chart_type = spec.chart_types[index % len(spec.chart_types)]
    rng = np.random.default_rng([spec.seed, index])
    canvas = _Canvas(spec.image_size, spec.font_sizes, rng)
    _DRAWERS[chart_type](canvas)
    pixels = np.asarray(canvas.image, dtype=np.float32) / 255.0
    blocks = tuple(TextBlock(box=s.box, role=s.role, transcript=s.transcript) for s in canvas.spans)
    image = LabeledImage(pixels=pixels, chart_type=chart_type, blocks=blocks,
                         source_id=f'synthetic-{spec.seed}-{index:05d}')
    return image, tuple(canvas.spans)


def generate_synthetic(spec: SyntheticSpec) -> List[LabeledImage]:
    """
    Draw spec.count charts, chart types allocated round-robin.

    Identical specs give identical pixels, boxes and transcripts.

    Raises:
        LayoutError: If the image size cannot hold a chart
    """
    return [generate_chart(spec, i)[0] for i in range(spec.count)]


def write_synthetic(images: Sequence[LabeledImage], out_dir: str) -> List[str]:
    """
    Write PNG + annotation JSON pairs readable by load_annotations.

    Returns:
        Paths of the written PNG files
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for image in images:
        stem = os.path.join(out_dir, os.path.basename(image.source_id))
        save_image(image.pixels, stem + '.png')
        save_annotation(image, stem + '.json')
        paths.append(stem + '.png')
    logger.info("Wrote %d synthetic charts to %s", len(paths), out_dir)
    return paths
