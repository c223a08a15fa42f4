"""
metrics.py - Evaluation mathematics

Confusion-count metrics, one-to-one detection matching, all-point average
precision, pooled mAP at IoU 0.5, per-class reports, recognition scores and
precision/recall curves. Every function here is pure.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from rapidfuzz.distance import Levenshtein
from sklearn.metrics import precision_recall_curve

from .core.geometry import BBox, iou
from .errors import DataError

# Full-scale published results, kept for side-by-side reporting only.
REFERENCE_TARGETS = {
    'chart_type_f1': 0.970,
    'detection_map50': {
        'horizontal-bar': 0.953,
        'vertical-bar': 0.972,
        'line': 0.960,
        'scatter': 0.925,
    },
    'text_role_f1': {
        'horizontal-bar': 0.909,
        'vertical-bar': 0.899,
        'line': 0.842,
        'scatter': 0.885,
    },
}


@dataclass(frozen=True)
class ConfusionCounts:
    """True/false positive/negative tallies."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError(f"confusion counts must be non-negative: {self}")

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ratio(numerator: float, denominator: float) -> float:
    # Zero denominators score 0; degenerate_metrics() reports which ones.
    return numerator / denominator if denominator > 0 else 0.0


def accuracy(c: ConfusionCounts) -> float:
    """(TP + TN) / (TP + TN + FP + FN)"""
    return _ratio(c.tp + c.tn, c.total)


def precision(c: ConfusionCounts) -> float:
    """TP / (TP + FP)"""
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    """TP / (TP + FN)"""
    return _ratio(c.tp, c.tp + c.fn)


def f1(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN), the count form of the harmonic mean."""
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def f1_harmonic(p: float, r: float) -> float:
    """2PR / (P + R)"""
    return _ratio(2 * p * r, p + r)


def degenerate_metrics(c: ConfusionCounts) -> Tuple[str, ...]:
    """Names of the metrics whose denominator is zero for these counts."""
    flags = []
    if c.total == 0:
        flags.append('accuracy')
    if c.tp + c.fp == 0:
        flags.append('precision')
    if c.tp + c.fn == 0:
        flags.append('recall')
    if 2 * c.tp + c.fp + c.fn == 0:
        flags.append('f1')
    return tuple(flags)


@dataclass(frozen=True)
class DetectionMatch:
    """
    Matching outcome for one image.

    Attributes:
        scores: Prediction scores in descending order
        labels: True where the prediction at the same position is a true positive
        fn: Ground truths left unmatched
        num_gt: Number of ground truths
    """

    scores: Tuple[float, ...]
    labels: Tuple[bool, ...]
    fn: int
    num_gt: int

    @property
    def tp(self) -> int:
        return sum(self.labels)

    @property
    def fp(self) -> int:
        return len(self.labels) - self.tp


def match_detections(preds: Sequence[Tuple[BBox, float]], gts: Sequence[BBox],
                     iou_threshold: float = 0.5) -> DetectionMatch:
    """
    Match predictions to ground truths one-to-one.

    Predictions are visited by descending score (stable for ties); each
    claims the unmatched ground truth with the highest IoU if that IoU is at
    least iou_threshold, and is a false positive otherwise.

    Args:
        preds: (box, score) pairs
        gts: Ground-truth boxes
        iou_threshold: Minimum IoU of a true positive

    Returns:
        DetectionMatch
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    matched = [False] * len(gts)
    labels = []
    for i in order:
        box = preds[i][0]
        best, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            overlap = iou(box, gt)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            labels.append(True)
        else:
            labels.append(False)
    return DetectionMatch(
        scores=tuple(float(preds[i][1]) for i in order),
        labels=tuple(labels),
        fn=matched.count(False),
        num_gt=len(gts),
    )


def average_precision(labels: Sequence[bool], scores: Sequence[float], total_gt: int) -> float:
    """
    Area under the all-point interpolated precision/recall curve.

    Args:
        labels: True-positive flag per prediction
        scores: Score per prediction
        total_gt: Ground truths in the evaluated set

    Returns:
        AP in [0, 1]; 0.0 when there are no predictions

    Raises:
        DataError: If total_gt is zero
    """
    if total_gt < 1:
        raise DataError("average precision needs at least one ground truth")
    if len(labels) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='stable')
    true_pos = np.asarray(labels, dtype=np.float64)[order]
    acc_tp = np.cumsum(true_pos)
    acc_fp = np.cumsum(1.0 - true_pos)
    rec = acc_tp / total_gt
    prec = acc_tp / (acc_tp + acc_fp)

    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def map50(per_image: Sequence[Tuple[Sequence[Tuple[BBox, float]], Sequence[BBox]]]) -> float:
    """
    Single-class AP at IoU 0.5, pooled over a set of images.

    Args:
        per_image: (predictions, ground truths) per image

    Raises:
        DataError: If the set is empty or holds no ground truth
    """
    if not per_image:
        raise DataError("mAP needs at least one image")
    matches = [match_detections(preds, gts, 0.5) for preds, gts in per_image]
    labels = [label for m in matches for label in m.labels]
    scores = [score for m in matches for score in m.scores]
    total_gt = sum(m.num_gt for m in matches)
    return average_precision(labels, scores, total_gt)


@dataclass
class ClassReport:
    """
    Per-class one-vs-rest metrics plus macro averages.

    Macro averages run over the classes that occur in the truth or the
    predictions; classes absent from both are listed in `absent`.
    """

    classes: List[str]
    counts: Dict[str, ConfusionCounts]
    support: Dict[str, int]
    precision: Dict[str, float]
    recall: Dict[str, float]
    f1: Dict[str, float]
    degenerate: Dict[str, Tuple[str, ...]]
    confusion: List[List[int]]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    absent: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'accuracy': self.accuracy,
            'macro': {'precision': self.macro_precision, 'recall': self.macro_recall, 'f1': self.macro_f1},
            'classes': {
                name: {
                    'precision': self.precision[name],
                    'recall': self.recall[name],
                    'f1': self.f1[name],
                    'support': self.support[name],
                    'degenerate': list(self.degenerate[name]),
                }
                for name in self.classes
            },
            'absent': list(self.absent),
            'confusion': self.confusion,
        }


def per_class_report(true_labels: Sequence, predicted_labels: Sequence, classes: Sequence) -> ClassReport:
    """
    Build a per-class report.

    Args:
        true_labels: Reference labels
        predicted_labels: Predicted labels, same length
        classes: The class set; labels outside it are rejected

    Returns:
        ClassReport keyed by str(class)

    Raises:
        DataError: On length mismatch or labels outside the class set
    """
    if len(true_labels) != len(predicted_labels):
        raise DataError("true and predicted label lists differ in length")
    index = {c: i for i, c in enumerate(classes)}
    unknown = {label for label in list(true_labels) + list(predicted_labels) if label not in index}
    if unknown:
        raise DataError(f"labels outside the class set: {sorted(map(str, unknown))}")

    size = len(classes)
    matrix = np.zeros((size, size), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        matrix[index[t], index[p]] += 1
    total = int(matrix.sum())

    names = [_name(c) for c in classes]
    counts, support, prec, rec, f1s, degenerate = {}, {}, {}, {}, {}, {}
    present = []
    for i, name in enumerate(names):
        tp = int(matrix[i, i])
        fp = int(matrix[:, i].sum()) - tp
        fn = int(matrix[i, :].sum()) - tp
        c = ConfusionCounts(tp=tp, tn=total - tp - fp - fn, fp=fp, fn=fn)
        counts[name] = c
        support[name] = tp + fn
        prec[name], rec[name], f1s[name] = precision(c), recall(c), f1(c)
        degenerate[name] = degenerate_metrics(c)
        if tp + fp + fn > 0:
            present.append(name)

    def macro(values):
        return float(np.mean([values[n] for n in present])) if present else 0.0

    return ClassReport(
        classes=names,
        counts=counts,
        support=support,
        precision=prec,
        recall=rec,
        f1=f1s,
        degenerate=degenerate,
        confusion=matrix.tolist(),
        accuracy=_ratio(float(np.trace(matrix)), total),
        macro_precision=macro(prec),
        macro_recall=macro(rec),
        macro_f1=macro(f1s),
        absent=[n for n in names if n not in present],
    )


def _name(label) -> str:
    return getattr(label, 'label', str(label))


@dataclass(frozen=True)
class RecognitionScore:
    exact_match: float
    edit_distance: float
    count: int


def recognition_score(predicted: Sequence[str], reference: Sequence[str]) -> RecognitionScore:
    """
    Exact-match rate and mean normalized edit distance.

    Each Levenshtein distance is divided by the longer of the two strings
    (0 when both are empty).

    Raises:
        DataError: If the lists differ in length
    """
    if len(predicted) != len(reference):
        raise DataError(f"{len(predicted)} predictions for {len(reference)} references")
    if not reference:
        return RecognitionScore(0.0, 0.0, 0)
    exact = sum(p == r for p, r in zip(predicted, reference))
    distances = [_ratio(Levenshtein.distance(p, r), max(len(p), len(r))) for p, r in zip(predicted, reference)]
    return RecognitionScore(exact / len(reference), float(np.mean(distances)), len(reference))


@dataclass(frozen=True)
class PRPoint:
    precision: float
    recall: float
    threshold: float


def pr_curve(scores: Sequence[float], positives: Sequence[bool]) -> List[PRPoint]:
    """
    Precision and recall at every distinct score threshold, highest first.

    A sample counts as predicted positive when its score is at least the
    threshold. Thresholds below the one that first reaches full recall may be
    left out, depending on the scikit-learn release.

    Raises:
        DataError: If the inputs differ in length or hold no positive sample
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape:
        raise DataError(f"{scores.size} scores for {positives.size} labels")
    if not positives.any():
        raise DataError("precision/recall curve needs at least one positive sample")
    prec, rec, thresholds = precision_recall_curve(positives.astype(np.int64), scores)
    # last precision/recall pair is the (1, 0) end point with no threshold
    return [PRPoint(float(p), float(r), float(t))
            for p, r, t in zip(prec[-2::-1], rec[-2::-1], thresholds[::-1])]
