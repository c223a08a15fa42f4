"""
evaluation.py - Stage-by-stage evaluation on labeled charts

Each stage is scored on its own, fed with ground truth from the earlier
stages: detection and role models are picked by the true chart type, and
recognition reads ground-truth crops.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .common import ensure_min_size
from .core.pipeline import select_for_type
from .core.vocab import ChartType, TextRole
from .data.crops import block_crops
from .errors import DataError
from .metrics import (REFERENCE_TARGETS, ClassReport, PRPoint, map50, per_class_report, pr_curve,
                      recognition_score)
from .models.backbone import predict_proba
from .models.detector import detect
from .models.recognizer import recognize_batch
from .models.upscaler import MIN_CROP_SIZE, generate

logger = logging.getLogger(__name__)


def _by_chart_type(images):
    groups = {}
    for image in images:
        if image.chart_type is None:
            raise DataError(f"{image.source_id}: evaluation needs a chart type")
        groups.setdefault(image.chart_type, []).append(image)
    return dict(sorted(groups.items()))


def evaluate_chart_type(model, images: Sequence) -> dict:
    """
    Score the chart-type classifier.

    Returns:
        Per-class report dictionary plus the reference macro-F1
    """
    if not images:
        raise DataError("no images to evaluate")
    probs = predict_proba(model, [image.pixels for image in images])
    predicted = [ChartType(int(code)) for code in probs.argmax(dim=-1).tolist()]
    report = per_class_report([image.chart_type for image in images], predicted, list(ChartType))
    out = report.to_dict()
    out['reference_f1'] = REFERENCE_TARGETS['chart_type_f1']
    return out


@dataclass
class DetectionReport:
    """mAP at IoU 0.5 per chart type and pooled over all images."""

    per_type: Dict[str, float] = field(default_factory=dict)
    images: Dict[str, int] = field(default_factory=dict)
    pooled: float = 0.0

    def to_dict(self) -> dict:
        return {
            'map50': dict(self.per_type),
            'images': dict(self.images),
            'pooled_map50': self.pooled,
            'reference_map50': {k: REFERENCE_TARGETS['detection_map50'].get(k) for k in self.per_type},
        }


def evaluate_detection(detectors, images: Sequence, threshold: float = 0.001) -> DetectionReport:
    """
    Score text detection.

    Args:
        detectors: A GridDetector, or a mapping from chart-type label or 'shared' to one
        images: LabeledImage list with ground-truth blocks
        threshold: Objectness threshold for the ranked predictions; kept low so
            the precision/recall envelope covers the whole score range

    Returns:
        DetectionReport
    """
    if not isinstance(detectors, dict):
        detectors = {'shared': detectors}
    report = DetectionReport()
    pooled = []
    for chart_type, group in _by_chart_type(images).items():
        model = select_for_type(detectors, chart_type, 'detection')
        per_image = []
        for image in group:
            found = detect(image.pixels, model, threshold=threshold)
            per_image.append(([(d.box, d.objectness) for d in found], [b.box for b in image.blocks]))
        pooled.extend(per_image)
        if sum(len(gts) for _, gts in per_image):
            report.per_type[chart_type.label] = map50(per_image)
            report.images[chart_type.label] = len(group)
    report.pooled = map50(pooled)
    return report


@dataclass
class RoleReport:
    """Role classification reports per chart type and pooled, with PR curves per role."""

    per_type: Dict[str, ClassReport] = field(default_factory=dict)
    pooled: ClassReport = None
    pr_curves: Dict[str, List[PRPoint]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'per_type': {k: r.to_dict() for k, r in self.per_type.items()},
            'pooled': self.pooled.to_dict() if self.pooled is not None else None,
            'reference_f1': {k: REFERENCE_TARGETS['text_role_f1'].get(k) for k in self.per_type},
        }


def evaluate_text_role(role_models, images: Sequence, margin: float = 1.0) -> RoleReport:
    """
    Score role classification on ground-truth crops.

    Args:
        role_models: A SwinClassifier, or a mapping from chart-type label or 'shared' to one
        images: LabeledImage list
        margin: Crop margin in pixels

    Returns:
        RoleReport
    """
    if not isinstance(role_models, dict):
        role_models = {'shared': role_models}
    roles = list(TextRole)
    report = RoleReport()
    all_true, all_pred, all_probs = [], [], []
    for chart_type, group in _by_chart_type(images).items():
        crops, _ = block_crops(group, margin)
        crops = [(piece, block) for piece, block, _ in crops if block.role is not None]
        if not crops:
            continue
        model = select_for_type(role_models, chart_type, 'text-role')
        probs = predict_proba(model, [piece for piece, _ in crops]).numpy()
        true = [block.role for _, block in crops]
        pred = [TextRole(int(code)) for code in probs.argmax(axis=1)]
        report.per_type[chart_type.label] = per_class_report(true, pred, roles)
        all_true.extend(true)
        all_pred.extend(pred)
        all_probs.append(probs)
    if not all_true:
        raise DataError("no labeled text blocks to evaluate")
    report.pooled = per_class_report(all_true, all_pred, roles)
    report.pr_curves = role_pr_curves(np.concatenate(all_probs), all_true)
    return report


def role_pr_curves(probs: np.ndarray, true_roles: Sequence[TextRole]) -> Dict[str, List[PRPoint]]:
    """One-vs-rest precision/recall points per role present in the truth."""
    curves = {}
    true_codes = np.asarray([int(r) for r in true_roles])
    for role in TextRole:
        positives = true_codes == int(role)
        if positives.any():
            curves[role.label] = pr_curve(probs[:, int(role)], positives)
    return curves


@dataclass(frozen=True)
class RecognitionRow:
    """Recognition score at one upscaling setting."""

    outscale: float
    exact_match: float
    edit_distance: float
    count: int

    @property
    def setting(self) -> str:
        return 'none' if self.outscale == 1.0 else f'sr x{self.outscale:g}'


def upscale_crops(crops: Sequence[np.ndarray], generator, outscale: float) -> List[np.ndarray]:
    """Upscale crops the way the pipeline does; outscale 1.0 leaves them as they are."""
    if outscale == 1.0:
        return list(crops)
    return [generate(ensure_min_size(c, MIN_CROP_SIZE), generator, outscale) for c in crops]


def evaluate_recognition(recognizer, crops: Sequence[np.ndarray], transcripts: Sequence[str],
                         generator=None, outscales: Sequence[float] = (1.5,),
                         ablate: bool = False) -> List[RecognitionRow]:
    """
    Score the recognizer on ground-truth crops.

    Args:
        recognizer: Trained TextRecognizer
        crops: Text crops
        transcripts: Reference transcripts
        generator: Trained RRDBNet; without one only the plain crops are scored
        outscales: Upscaling factors to score
        ablate: Also score the crops without upscaling

    Returns:
        One RecognitionRow per setting, no-upscaling first
    """
    if len(crops) != len(transcripts):
        raise DataError(f"{len(crops)} crops for {len(transcripts)} transcripts")
    settings = []
    if ablate or generator is None:
        settings.append(1.0)
    if generator is not None:
        settings.extend(s for s in outscales if s not in settings)

    rows = []
    for outscale in settings:
        inputs = upscale_crops(crops, generator, outscale)
        predicted = [text for text, _ in recognize_batch(inputs, recognizer)] if inputs else []
        score = recognition_score(predicted, list(transcripts))
        rows.append(RecognitionRow(outscale, score.exact_match, score.edit_distance, score.count))
        logger.info("Recognition at %s: exact %.3f", rows[-1].setting, score.exact_match)
    return rows
