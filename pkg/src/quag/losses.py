"""Training objectives.

Each task head is trained with a negative log-likelihood over its predicted
distributions; the per-iteration objective adds the contrastive alignment
loss scaled by a nonnegative trade-off weight. Probabilities are clamped at
1e-12 before the log so all losses stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from quag.data import PAD
from quag.heads import SpanDistribution
from quag.tensor import Tensor, log_clamped, log_softmax, sum_all

__all__ = [
    "TASKS",
    "LossBundle",
    "retrieval_loss",
    "segmentation_loss",
    "caption_loss",
    "total_loss",
]

TASKS = ("ret", "seg", "cap")


@dataclass
class LossBundle:
    task: str
    task_loss: Tensor
    msp_loss: Tensor
    total: Tensor
    lam: float


def _one_hot(index: int, size: int) -> Tensor:
    if not (0 <= index < size):
        raise IndexError(f"index {index} out of range for size {size}")
    row = np.zeros(size, dtype=np.float32)
    row[index] = 1.0
    return Tensor(row)


def retrieval_loss(dists: Sequence[SpanDistribution],
                   targets: Sequence[tuple[int, int]]) -> Tensor:
    """Batch-mean NLL of the ground-truth start and end indices."""
    if len(dists) != len(targets) or not dists:
        raise ValueError("retrieval_loss needs matching, non-empty batches")
    b = len(dists)
    terms = []
    for dist, (y_start, y_end) in zip(dists, targets):
        n = dist.p_start.shape[0]
        terms.append(-sum_all(log_clamped(dist.p_start) * _one_hot(y_start, n)))
        terms.append(-sum_all(log_clamped(dist.p_end) * _one_hot(y_end, n)))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / b)


def segmentation_loss(step_dists: Sequence[Tensor], gt_steps: Sequence[int],
                      masks: Optional[Sequence[np.ndarray]] = None) -> Tensor:
    """Batch-mean NLL over step-prediction instances.

    A ground-truth index that is masked in its distribution signals an
    inconsistency between the mask and the annotations and raises instead of
    silently producing a clamped log.
    """
    if len(step_dists) != len(gt_steps) or not step_dists:
        raise ValueError("segmentation_loss needs matching, non-empty batches")
    terms = []
    for i, (dist, y) in enumerate(zip(step_dists, gt_steps)):
        n = dist.shape[0]
        if not (0 <= y < n):
            raise IndexError(f"step index {y} out of range for {n} frames")
        if masks is not None and masks[i][y]:
            raise ValueError(f"instance {i}: ground-truth step {y} is masked out")
        if masks is None and dist.data[y] == 0.0:
            raise ValueError(f"instance {i}: ground-truth step {y} has zero probability")
        terms.append(-sum_all(log_clamped(dist) * _one_hot(y, n)))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / len(terms))


def caption_loss(logit_batch: Sequence[Tensor], gt_tokens: Sequence[Sequence[int]]) -> Tensor:
    """Token-level NLL summed per caption, averaged over the batch.

    Positions whose target is the padding token contribute exactly zero.
    """
    if len(logit_batch) != len(gt_tokens) or not logit_batch:
        raise ValueError("caption_loss needs matching, non-empty batches")
    terms = []
    for logits, targets in zip(logit_batch, gt_tokens):
        m, vocab = logits.shape
        if len(targets) != m:
            raise ValueError(f"{len(targets)} targets for {m} logit rows")
        select = np.zeros((m, vocab), dtype=np.float32)
        for i, tok in enumerate(targets):
            if not (0 <= tok < vocab):
                raise IndexError(f"token id {tok} outside vocabulary of size {vocab}")
            if tok != PAD:
                select[i, tok] = 1.0
        terms.append(-sum_all(log_softmax(logits) * Tensor(select)))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / len(terms))


def total_loss(task: str, task_loss: Tensor, msp_loss: Tensor, lam: float) -> LossBundle:
    """Weighted combination of one task loss with the alignment loss."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    if lam < 0:
        raise ValueError(f"trade-off weight must be nonnegative, got {lam}")
    total = task_loss + msp_loss * lam
    for name, value in (("task", task_loss), ("msp", msp_loss), ("total", total)):
        if not np.isfinite(value.data).all():
            raise FloatingPointError(f"{name} loss is not finite")
    return LossBundle(task=task, task_loss=task_loss, msp_loss=msp_loss, total=total, lam=lam)
