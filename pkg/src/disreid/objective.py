"""Loss terms and their composition into the training objective.

The classification side is ce_id + aux_scale * (ce_aug + ce_lr) +
cam_scale * ce_cam; the total adds the metric terms: triplet, disentangling,
intra-class, and aux_scale times the frame-weight loss.  Every term is
individually gradient-checked; composition is plain weighted addition so
disabling a flag reproduces the reduced objective exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .tensor import Tensor

ALL_COMPONENTS = frozenset(
    {"tlm", "fwg", "sao", "l_lr", "l_w", "l_ic", "l_dis", "l_cam"}
)

_BIG = 1e9  # masking constant; distances here are bounded far below this


def validate_components(components) -> frozenset[str]:
    comps = frozenset(components)
    unknown = comps - ALL_COMPONENTS
    if unknown:
        raise ConfigError(
            f"unknown components {sorted(unknown)}; valid: {sorted(ALL_COMPONENTS)}"
        )
    return comps


def intra_class_loss(f_id: Tensor, labels) -> Tensor:
    """Per identity: mean squared deviation from the class mean, summed over
    feature dimensions; summed over the identities present in the batch."""
    if f_id.ndim != 2:
        raise T.ShapeError(f"intra_class_loss expects (B, c), got {f_id.shape}")
    labels = np.asarray(labels)
    if labels.shape != (f_id.shape[0],):
        raise T.ShapeError(
            f"intra_class_loss: labels shape {labels.shape} does not match "
            f"batch {f_id.shape[0]}"
        )
    if labels.size == 0:
        raise ConfigError("intra_class_loss: empty batch")
    total = None
    for value in np.unique(labels):
        members = T.take(f_id, np.flatnonzero(labels == value))
        mean = T.reduce_mean(members, axes=(0,), keepdims=True)
        dev = members - mean
        term = T.reduce_sum(T.reduce_mean(dev * dev, axes=(0,)), axes=(0,))
        total = term if total is None else total + term
    return total


def pairwise_euclidean(f: Tensor) -> Tensor:
    """(B, c) -> (B, B) euclidean distances on unnormalized embeddings."""
    b, c = f.shape
    diff = T.reshape(f, (b, 1, c)) - T.reshape(f, (1, b, c))
    sq = T.reduce_sum(diff * diff, axes=(2,))
    # +1e-12 keeps the gradient finite at coincident embeddings
    return T.sqrt(sq + 1e-12)


def triplet_loss(f_id: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss: hardest positive and negative per anchor."""
    labels = np.asarray(labels)
    if f_id.ndim != 2 or labels.shape != (f_id.shape[0],):
        raise T.ShapeError(
            f"triplet_loss expects (B, c) with B labels, got {f_id.shape} "
            f"and {labels.shape}"
        )
    b = f_id.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all() or not neg_mask.any(axis=1).all():
        raise ConfigError(
            "triplet_loss: every anchor needs at least one positive and one "
            "negative in the batch (use P >= 2 identities with K >= 2 clips)"
        )
    dist = pairwise_euclidean(f_id)
    pos = Tensor(pos_mask.astype(f_id.dtype))
    neg = Tensor(neg_mask.astype(f_id.dtype))
    hardest_pos = T.reduce_max(dist * pos - _BIG * (1.0 - pos), axes=(1,))
    hardest_neg = T.reduce_min(dist * neg + _BIG * (1.0 - neg), axes=(1,))
    return T.reduce_mean(T.relu(hardest_pos - hardest_neg + margin))


def _check_scale(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def _check_term(name: str, value: Tensor | float) -> Tensor | float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if v < -1e-9:
        raise ValueError(f"loss term {name} is negative ({v}); invariant violated")
    return value


def compose_ce(
    ce_id, ce_aug, ce_lr, ce_cam, aux_scale: float = 0.1, cam_scale: float | None = None
):
    """ce_id + aux_scale * (ce_aug + ce_lr) + cam_scale * ce_cam.

    ``cam_scale`` defaults to ``aux_scale``; disabled terms are passed as 0.
    """
    aux_scale = _check_scale("aux_scale", aux_scale)
    cam_scale = aux_scale if cam_scale is None else _check_scale("cam_scale", cam_scale)
    for name, value in (("ce_id", ce_id), ("ce_aug", ce_aug), ("ce_lr", ce_lr), ("ce_cam", ce_cam)):
        _check_term(name, value)
    return ce_id + aux_scale * (ce_aug + ce_lr) + cam_scale * ce_cam


def compose_total(ce, tri, dis, ic, w_loss, aux_scale: float = 0.1):
    """Classification composite plus metric terms; w_loss rides aux_scale."""
    aux_scale = _check_scale("aux_scale", aux_scale)
    for name, value in (("tri", tri), ("dis", dis), ("ic", ic), ("w_loss", w_loss)):
        _check_term(name, value)
    return ce + tri + dis + ic + aux_scale * w_loss


# serialized per training step, one JSONL record each
REPORT_FIELDS = (
    "ce_id", "ce_aug", "ce_lr", "ce_cam", "tri", "dis", "ic", "w_loss", "total",
)


@dataclass
class LossReport:
    ce_id: float = 0.0
    ce_aug: float = 0.0
    ce_lr: float = 0.0
    ce_cam: float = 0.0
    tri: float = 0.0
    dis: float = 0.0
    ic: float = 0.0
    w_loss: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    def non_finite_terms(self) -> list[str]:
        return [name for name in REPORT_FIELDS if not np.isfinite(getattr(self, name))]
