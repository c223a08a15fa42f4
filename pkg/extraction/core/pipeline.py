"""
Pipeline orchestration.

ExtractionPipeline walks one image through the five stages in order:
chart type, text detection, then for every block upscaling, recognition
and role classification. Image-level stages must succeed; block-level
faults are contained to the block that raised them.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from ..common import find_images, load_image
from ..errors import ModelError
from .base_stage import ChartTypeStage, DetectionStage, RecognitionStage, RoleStage, UpscaleStage
from .context import StageContext
from .geometry import crop
from .records import STAGE_NAMES, ExtractionResult, LabeledImage, TextBlock
from .vocab import ChartType, TextRole

logger = logging.getLogger(__name__)

SHARED = 'shared'


def _by_type(stages, kind):
    if isinstance(stages, Mapping):
        if not stages:
            raise ModelError(f"no {kind} stage configured")
        return dict(stages)
    return {SHARED: stages}


class ExtractionPipeline:
    """
    Runs the stages on whole images.

    Detector and role stages may be given per chart type as a mapping from
    chart-type label (or 'shared') to stage; the chart-type prediction picks
    the entry, falling back to 'shared'.
    """

    def __init__(self, chart_type: ChartTypeStage,
                 detector: Union[DetectionStage, Mapping[str, DetectionStage]],
                 upscaler: UpscaleStage, recognizer: RecognitionStage,
                 role: Union[RoleStage, Mapping[str, RoleStage]],
                 outscale: float = 1.5, crop_margin: float = 1.0):
        self.chart_type = chart_type
        self.detectors = _by_type(detector, 'detection')
        self.upscaler = upscaler
        self.recognizer = recognizer
        self.roles = _by_type(role, 'text-role')
        self.outscale = outscale
        self.crop_margin = crop_margin

    @classmethod
    def from_bundle(cls, bundle, outscale: float = 1.5, crop_margin: float = 1.0) -> 'ExtractionPipeline':
        """
        Wrap the models of a complete PipelineBundle in stage adapters.

        Raises:
            BundleError: If a stage is missing from the bundle
        """
        from ..models.backbone import ChartTypeClassifier, TextRoleClassifier
        from ..models.detector import GridTextDetector
        from ..models.recognizer import AttentionRecognizer
        from ..models.upscaler import TextUpscaler

        bundle.require_complete()
        return cls(
            chart_type=ChartTypeClassifier(bundle.chart_type),
            detector={key: GridTextDetector(model) for key, model in bundle.detectors.items()},
            upscaler=TextUpscaler(bundle.upscaler),
            recognizer=AttentionRecognizer(bundle.recognizer),
            role={key: TextRoleClassifier(model) for key, model in bundle.text_roles.items()},
            outscale=outscale,
            crop_margin=crop_margin,
        )

    def detector_for(self, chart_type: Optional[ChartType]) -> DetectionStage:
        return select_for_type(self.detectors, chart_type, 'detection')

    def role_for(self, chart_type: Optional[ChartType]) -> RoleStage:
        return select_for_type(self.roles, chart_type, 'text-role')

    def run(self, pixels: np.ndarray, source_id: str = '') -> ExtractionResult:
        """
        Extract chart type and role-labeled, transcribed text blocks.

        Args:
            pixels: H x W x 3 array in [0, 1]
            source_id: Identifier carried into the result

        Returns:
            ExtractionResult with timings for all five stages
        """
        timings = {name: 0.0 for name in STAGE_NAMES}
        context = StageContext(source_id=source_id, image_size=tuple(pixels.shape[:2]),
                               outscale=self.outscale, crop_margin=self.crop_margin)

        start = time.perf_counter()
        chart_type, confidence = self.chart_type.classify(pixels, context)
        timings['chart_type'] = time.perf_counter() - start
        context = context.with_chart_type(chart_type, confidence)

        start = time.perf_counter()
        detections = self.detector_for(chart_type).detect(pixels, context)
        timings['detection'] = time.perf_counter() - start

        role_stage = self.role_for(chart_type)
        blocks = [self._process_block(pixels, detection.box, context.with_block(i), role_stage, timings)
                  for i, detection in enumerate(detections)]
        logger.debug("%s: %s with %d blocks", source_id, chart_type.label, len(blocks))
        return ExtractionResult(chart_type=chart_type, chart_confidence=confidence, blocks=blocks,
                                timings=timings, source_id=source_id)

    def _process_block(self, pixels, box, context: StageContext, role_stage: RoleStage,
                       timings: Dict[str, float]) -> TextBlock:
        piece = crop(pixels, box.expand(context.crop_margin))
        upscaled = _guarded('upscaling', timings, context, piece,
                            lambda: self.upscaler.upscale(piece, context))
        text, text_confidence = _guarded('recognition', timings, context, ('', 0.0),
                                         lambda: self.recognizer.recognize(upscaled, context))
        role, role_confidence = _guarded('text_role', timings, context, (TextRole.OTHER, 0.0),
                                         lambda: role_stage.classify_role(upscaled, context))
        return TextBlock(box=box, role=role, transcript=text, confidence=text_confidence,
                         role_confidence=role_confidence)


def select_for_type(stages: Dict[str, object], chart_type: Optional[ChartType], kind: str):
    if chart_type is not None and chart_type.label in stages:
        return stages[chart_type.label]
    if SHARED in stages:
        return stages[SHARED]
    raise ModelError(f"no {kind} stage for chart type {chart_type.label if chart_type else None}")


def _guarded(stage: str, timings: Dict[str, float], context: StageContext, fallback, call):
    # A failing block stage yields the fallback; the other blocks are unaffected.
    start = time.perf_counter()
    try:
        return call()
    except Exception as e:
        logger.warning("%s block %d: %s failed (%s), using fallback",
                       context.source_id, context.block_index, stage, e)
        return fallback
    finally:
        timings[stage] += time.perf_counter() - start


def _as_pixels(image) -> Tuple[np.ndarray, str]:
    if isinstance(image, str):
        return load_image(image), image
    if isinstance(image, LabeledImage):
        return image.pixels, image.source_id
    return np.asarray(image, dtype=np.float32), ''


def extract(image, bundle, outscale: float = 1.5) -> ExtractionResult:
    """
    Run the full pipeline on one image.

    Args:
        image: Image path, H x W x 3 array or LabeledImage
        bundle: Complete PipelineBundle, or a ready ExtractionPipeline
        outscale: Upscaling factor for text crops

    Raises:
        DataError: If the image cannot be read
        BundleError: If the bundle is incomplete
    """
    pixels, source_id = _as_pixels(image)
    pipeline = bundle if isinstance(bundle, ExtractionPipeline) else ExtractionPipeline.from_bundle(bundle, outscale)
    return pipeline.run(pixels, source_id)


@dataclass
class BatchSummary:
    """Results of a batch run, in sorted path order, plus per-image failures."""

    results: List[ExtractionResult] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'images': len(self.results) + len(self.failures),
            'succeeded': len(self.results),
            'failed': len(self.failures),
            'failures': [{'source': path, 'error': message} for path, message in self.failures],
        }


def batch_extract(directory: str, bundle, parallelism: int = 1, outscale: float = 1.5) -> BatchSummary:
    """
    Extract every image in a directory.

    Images fan out over a thread pool sharing the read-only models; the
    results do not depend on the degree of parallelism. Per-image errors
    are collected, never raised.

    Args:
        directory: Directory scanned with find_images
        bundle: Complete PipelineBundle or ExtractionPipeline
        parallelism: Worker threads (1 runs inline)
        outscale: Upscaling factor for text crops

    Returns:
        BatchSummary
    """
    pipeline = bundle if isinstance(bundle, ExtractionPipeline) else ExtractionPipeline.from_bundle(bundle, outscale)
    paths = find_images(directory)

    def run_one(path):
        try:
            return pipeline.run(load_image(path), path), None
        except Exception as e:
            logger.warning("Extraction failed for %s: %s", path, e)
            return None, str(e)

    if parallelism > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(run_one, paths))
    else:
        outcomes = [run_one(path) for path in paths]

    summary = BatchSummary()
    for path, (result, error) in zip(paths, outcomes):
        if result is not None:
            summary.results.append(result)
        else:
            summary.failures.append((path, error))
    logger.info("Batch extraction: %d succeeded, %d failed", len(summary.results), len(summary.failures))
    return summary
