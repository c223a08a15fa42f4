"""
Deterministic stratified train/test splits.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ..errors import UsageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train and test lists plus the parameters that produced them."""

    train: Tuple
    test: Tuple
    seed: int
    ratio: float

    def source_ids(self):
        return [r.source_id for r in self.train], [r.source_id for r in self.test]


def stratified_split(records: Sequence, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """
    Split records per chart type so each stratum keeps the train ratio.

    Within a stratum the records are ordered by source_id and shuffled with
    a generator seeded by (seed, chart-type code); round(ratio * n) of them
    go to train, clamped so both sides get at least one item. A stratum with
    a single record goes to train.

    Args:
        records: Items with chart_type and source_id (AnnotationRecord or LabeledImage)
        ratio: Train fraction, strictly between 0 and 1
        seed: Shuffle seed

    Returns:
        DatasetSplit

    Raises:
        UsageError: If ratio is outside (0, 1)
    """
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"split ratio must lie in (0, 1), got {ratio}")
    strata = {}
    for record in records:
        strata.setdefault(int(record.chart_type), []).append(record)

    train, test = [], []
    for code in sorted(strata):
        items = sorted(strata[code], key=lambda r: r.source_id)
        if len(items) < 2:
            logger.warning("Chart type %s has a single item; assigned to train", items[0].chart_type.label)
            train.extend(items)
            continue
        order = np.random.default_rng([seed, code]).permutation(len(items))
        n_train = min(len(items) - 1, max(1, int(math.floor(ratio * len(items) + 0.5))))
        train.extend(items[i] for i in order[:n_train])
        test.extend(items[i] for i in order[n_train:])
    return DatasetSplit(train=tuple(train), test=tuple(test), seed=seed, ratio=ratio)
