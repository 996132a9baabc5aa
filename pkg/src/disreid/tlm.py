"""Target localization: region-wise spatial attention over identity features.

The feature map is read in three horizontal regions (left half, central half,
right half).  Each region is summarized by channel max and mean, scored by a
shared 3x3 conv, and normalized to a per-frame spatial distribution; the left
and right maps tile the width and the middle map is added onto the central
columns.  The result modulates the identity features with a residual, so an
all-zero attention map is exactly the identity.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module, cross_entropy
from .tensor import Tensor


def split_lmr(fmap: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Left half, central half, right half along the width axis of (N,c,h,w)."""
    if fmap.ndim != 4:
        raise T.ShapeError(f"split_lmr expects (N, c, h, w), got {fmap.shape}")
    w = fmap.shape[3]
    if w % 4:
        raise T.ShapeError(f"split_lmr: width axis 3 ({w}) must be divisible by 4")
    half, quarter = w // 2, w // 4
    left = fmap[:, :, :, :half]
    middle = fmap[:, :, :, quarter : quarter + half]
    right = fmap[:, :, :, half:]
    return left, middle, right


def fuse_attention(a_left: Tensor, a_middle: Tensor, a_right: Tensor) -> Tensor:
    """Tile left/right maps across the width and add the middle map centrally.

    Inputs are (N, h, w/2); output is (N, h, w) with total mass 3 per frame
    when each input is a distribution.
    """
    for name, a in (("left", a_left), ("middle", a_middle), ("right", a_right)):
        if a.ndim != 3:
            raise T.ShapeError(f"fuse_attention: {name} map must be (N, h, w/2), got {a.shape}")
    if not (a_left.shape == a_middle.shape == a_right.shape):
        raise T.ShapeError(
            f"fuse_attention: region shapes differ "
            f"({a_left.shape}, {a_middle.shape}, {a_right.shape})"
        )
    n, h, half = a_left.shape
    quarter = half // 2
    sides = T.concat([a_left, a_right], axis=2)
    pad = Tensor(np.zeros((n, h, quarter)))
    centered = T.concat([pad, a_middle, pad], axis=2)
    return sides + centered


class TargetLocalization(Module):
    """Produces attended identity features F_t and the fused attention map."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        # one conv shared by all three regions: input is [channel-max; channel-mean]
        self.conv = Conv2d(1, 2, 3, rng)

    def region_attention(self, region: Tensor) -> Tensor:
        """(N, c, h, w2) -> per-frame spatial distribution (N, h, w2)."""
        pooled = T.concat(
            [
                T.reduce_max(region, axes=(1,), keepdims=True),
                T.reduce_mean(region, axes=(1,), keepdims=True),
            ],
            axis=1,
        )
        score = self.conv(pooled)  # (N, 1, h, w2)
        attn = T.softmax(score, axes=(2, 3))
        return T.reshape(attn, (attn.shape[0], attn.shape[2], attn.shape[3]))

    def __call__(self, f_id_map: Tensor) -> tuple[Tensor, Tensor]:
        left, middle, right = split_lmr(f_id_map)
        n = f_id_map.shape[0]
        # batch the three regions through the shared conv in one call
        pooled = T.concat(
            [
                T.concat(
                    [
                        T.reduce_max(r, axes=(1,), keepdims=True),
                        T.reduce_mean(r, axes=(1,), keepdims=True),
                    ],
                    axis=1,
                )
                for r in (left, middle, right)
            ],
            axis=0,
        )
        score = self.conv(pooled)
        attn = T.softmax(score, axes=(2, 3))
        flat = T.reshape(attn, (attn.shape[0], attn.shape[2], attn.shape[3]))
        a_left, a_middle, a_right = flat[:n], flat[n : 2 * n], flat[2 * n :]
        fused = fuse_attention(a_left, a_middle, a_right)
        gate = T.reshape(fused, (n, 1, fused.shape[1], fused.shape[2]))
        attended = gate * f_id_map + f_id_map
        return attended, fused


def side_vectors(attended: Tensor) -> tuple[Tensor, Tensor]:
    """Max-pool the left and right halves of F_t to per-frame vectors (N, c)."""
    if attended.ndim != 4:
        raise T.ShapeError(f"side_vectors expects (N, c, h, w), got {attended.shape}")
    half = attended.shape[3] // 2
    f_left = T.reduce_max(attended[:, :, :, :half], axes=(2, 3))
    f_right = T.reduce_max(attended[:, :, :, half:], axes=(2, 3))
    return f_left, f_right


def lr_loss(f_left: Tensor, f_right: Tensor, labels, classifier: Linear) -> Tensor:
    """Identity cross-entropy on clip-level left and right side vectors, summed."""
    return cross_entropy(classifier(f_left), labels) + cross_entropy(
        classifier(f_right), labels
    )
