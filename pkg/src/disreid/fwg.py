"""Frame weight generation: temporal attention from frame difficulty.

Pseudo-labels come from per-frame classification difficulty under the live
identity classifier: frames with low cross-entropy get high weight.  A 1x1
conv over the channel axis predicts a matching score per frame; its weights
are trained to mimic the pseudo-labels, and the predicted distribution
aggregates per-frame vectors into the clip-level identity embedding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


def _stable_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_label(
    frame_vectors: np.ndarray,
    labels,
    classifier_weight: np.ndarray,
    mode: str = "softmax",
) -> np.ndarray:
    """Target frame-weight distribution, one row per clip; no gradient.

    ``frame_vectors`` is (B, c, t); difficulty is the per-frame cross-entropy
    under the live classifier, reversed so easy frames score high, then
    normalized per clip.  ``mode`` selects softmax or plain sum normalization
    of the reversed scores.
    """
    if mode not in ("softmax", "sumnorm"):
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    b, c, t = frame_vectors.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    frames = frame_vectors.transpose(0, 2, 1).reshape(b * t, c)
    logits = frames @ classifier_weight.T
    lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1))
    lse += logits.max(axis=1)
    picked = logits[np.arange(b * t), np.repeat(labels, t)]
    ce = (lse - picked).reshape(b, t)
    reversed_scores = ce.max(axis=1, keepdims=True) - ce
    if mode == "softmax":
        return _stable_softmax_rows(reversed_scores)
    total = reversed_scores.sum(axis=1, keepdims=True)
    out = np.full((b, t), 1.0 / t)
    ok = total[:, 0] > 1e-12
    out[ok] = reversed_scores[ok] / total[ok]
    return out


class FrameWeightPredictor(Module):
    """1x1 conv over channels scoring each frame, softmax-normalized per clip."""

    def __init__(self, channels: int, rng: np.random.Generator, mode: str = "reverse"):
        super().__init__()
        if mode not in ("reverse", "direct"):
            raise ValueError(f"unknown predictor mode {mode!r}")
        self.mode = mode
        scale = np.sqrt(1.0 / channels)
        self.weight = self.register_parameter(
            "weight", Tensor(rng.normal(0.0, scale, size=(1, channels)))
        )

    def __call__(self, frame_vectors: Tensor) -> tuple[Tensor, Tensor]:
        """(B, c, t) -> (weights (B, t), raw scores (B, t))."""
        b, c, t = frame_vectors.shape
        frames = T.reshape(T.transpose(frame_vectors, (0, 2, 1)), (b * t, c))
        scores = T.reshape(T.matmul(frames, T.transpose(self.weight)), (b, t))
        if self.mode == "reverse":
            # detached max: shift invariance of softmax makes the gradient
            # identical, and the kink drops out of the graph
            shifted = T.reduce_max(scores, axes=(1,), keepdims=True).detach() - scores
        else:
            shifted = scores
        return T.softmax(shifted, axes=(1,)), scores


def frame_weight_loss(target: np.ndarray, predicted: Tensor) -> Tensor:
    """Mean squared error between pseudo-label and predicted distributions."""
    if predicted.shape != tuple(target.shape):
        raise T.ShapeError(
            f"frame_weight_loss: shapes differ "
            f"(target {tuple(target.shape)}, predicted {predicted.shape})"
        )
    diff = predicted - Tensor(target)
    return T.reduce_mean(diff * diff)


def temporal_attend(frame_vectors: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum over the frame axis: (B, c, t) x (B, t) -> (B, c)."""
    b, c, t = frame_vectors.shape
    if weights.shape != (b, t):
        raise T.ShapeError(
            f"temporal_attend: weights {weights.shape} do not match frames ({b}, {t})"
        )
    return T.reduce_sum(frame_vectors * T.reshape(weights, (b, 1, t)), axes=(2,))
