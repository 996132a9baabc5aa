"""Switching and aggregation of identity and camera features.

A parameterless training-time recombination: camera vectors are permuted
across the batch and summed onto identity vectors, synthesizing each identity
under another sample's camera.  Labels follow the identity half.  Supervision
reuses the shared identity classifier; nothing here owns weights.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from . import tensor as T
from .nn import Linear, cross_entropy
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class SwitchedBatch:
    augmented: Tensor          # (B, c) identity + permuted camera
    permutation: np.ndarray    # pi, drawn uniformly over all B! orderings
    labels: np.ndarray         # identity labels, unchanged


def switch_and_aggregate(
    f_id: Tensor,
    f_cam: Tensor,
    labels,
    rng: np.random.Generator,
) -> SwitchedBatch | None:
    """Build the camera-switched batch; returns None for batches of one."""
    if f_id.ndim != 2 or f_cam.ndim != 2 or f_id.shape != f_cam.shape:
        raise T.ShapeError(
            f"switch_and_aggregate expects matching (B, c) inputs, "
            f"got {f_id.shape} and {f_cam.shape}"
        )
    labels = np.asarray(labels)
    b = f_id.shape[0]
    if labels.shape != (b,):
        raise T.ShapeError(
            f"switch_and_aggregate: labels shape {labels.shape} does not match batch {b}"
        )
    if b < 2:
        log.info("switch_and_aggregate: batch of %d skipped", b)
        return None
    permutation = rng.permutation(b)
    augmented = f_id + T.take(f_cam, permutation)
    return SwitchedBatch(augmented=augmented, permutation=permutation, labels=labels.copy())


def switched_ce_loss(batch: SwitchedBatch, classifier: Linear) -> Tensor:
    """Mean identity cross-entropy on the camera-switched vectors."""
    return cross_entropy(classifier(batch.augmented), batch.labels)
