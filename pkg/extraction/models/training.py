"""
Shared pieces of the training loops: curves, optimizers, batch order, progress.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import torch
from tqdm import tqdm

logger = logging.getLogger(__name__)

_show_progress = False


def set_progress(enabled: bool):
    """Turn tqdm progress bars on or off for every trainer."""
    global _show_progress
    _show_progress = enabled


def progress(iterable, desc: str):
    return tqdm(iterable, desc=desc, disable=not _show_progress, leave=False)


@dataclass
class TrainingCurve:
    """
    Loss and accuracy history of one training run.

    Attributes:
        stage: Stage name ('chart-type', 'detector', ...)
        losses: Total loss per optimizer step
        train_accuracy: Accuracy on the training set at the end of each epoch
        val_accuracy: Accuracy on the validation set at the end of each epoch
        components: Extra per-step series, such as loss terms or phases
    """

    stage: str
    losses: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    components: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, name: str, value: float):
        self.components.setdefault(name, []).append(float(value))

    def rows(self):
        """Per-step rows for CSV output: step, loss, then every component."""
        names = sorted(self.components)
        length = max([len(self.losses)] + [len(self.components[n]) for n in names])
        header = ['step', 'loss'] + names
        rows = []
        for step in range(length):
            row = [step, _at(self.losses, step)]
            row.extend(_at(self.components[n], step) for n in names)
            rows.append(row)
        return header, rows

    def epoch_rows(self):
        header = ['epoch', 'train_accuracy', 'val_accuracy']
        rows = [[i, acc, _at(self.val_accuracy, i)] for i, acc in enumerate(self.train_accuracy)]
        return header, rows


def _at(values, index):
    return values[index] if index < len(values) else ''


def make_optimizer(parameters, schedule):
    """Adam with the schedule's learning rate, beta1 and weight decay."""
    return torch.optim.Adam(parameters, lr=schedule.learning_rate,
                            betas=(schedule.beta1, 0.999), weight_decay=schedule.weight_decay)


def batch_order(num_samples: int, schedule, generator: torch.Generator):
    """
    Yield (step, indices, epoch_finished) for schedule.steps minibatches.

    Each epoch is a fresh permutation drawn from generator; a short final
    batch of an epoch is kept so every sample is visited.
    """
    step = 0
    batch_size = min(schedule.batch_size, num_samples)
    while step < schedule.steps:
        order = torch.randperm(num_samples, generator=generator)
        for start in range(0, num_samples, batch_size):
            if step >= schedule.steps:
                return
            indices = order[start:start + batch_size]
            finished = start + batch_size >= num_samples
            yield step, indices, finished
            step += 1


def log_step(stage: str, step: int, loss: float, every: int = 50):
    if step % every == 0:
        logger.debug("%s step %d loss %.5f", stage, step, loss)
