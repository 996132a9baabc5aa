"""Convolutional backbone and the identity/camera feature split.

Four stages of two conv-norm-relu blocks each, widths c/8, c/4, c/2, c; the
stage-3 output feeds a 1x1 channel-expansion conv that grows a parallel
camera branch to the same width as the identity branch.  Frames of a clip
ride the batch axis, so everything here is per-frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ChannelNorm, Conv2d, Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A structural configuration is invalid (bad widths, strides, labels...)."""


@dataclass
class BackboneConfig:
    channels: int = 64
    strides: tuple[int, int, int, int] = (2, 2, 2, 1)

    def __post_init__(self):
        if self.channels % 8 != 0 or self.channels <= 0:
            raise ConfigError(f"channels must be a positive multiple of 8, got {self.channels}")
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != 4 or any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"strides must be four values in {{1, 2}}, got {self.strides}")

    @property
    def downsample(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    def validate_input(self, height: int, width: int) -> None:
        d = self.downsample
        if height % d or width % d:
            raise ConfigError(
                f"input {height}x{width} must be a multiple of the total "
                f"downsampling factor {d}"
            )


class ConvBlock(Module):
    def __init__(self, out_c: int, in_c: int, rng, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(out_c, in_c, 3, rng, stride=stride)
        self.norm = ChannelNorm(out_c)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class Backbone(Module):
    """Maps (N, 3, H, W) frames to the mid-level and identity feature maps."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config.channels
        widths = [c // 8, c // 4, c // 2, c]
        stages = []
        in_c = 3
        for width, stride in zip(widths, config.strides):
            stages.append(ConvBlock(width, in_c, rng, stride=stride))
            stages.append(ConvBlock(width, width, rng, stride=1))
            in_c = width
        self.stages = stages

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"backbone expects (N, 3, H, W), got {x.shape}")
        self.config.validate_input(x.shape[2], x.shape[3])
        out = x
        mid = None
        for i, block in enumerate(self.stages):
            out = block(out)
            if i == 5:  # end of stage 3
                mid = out
        return mid, out


class ChannelExpansion(Module):
    """1x1 conv doubling c/2 -> c; seeds the camera branch from mid features."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, channels // 2, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


def camera_vector(f_cam_map: Tensor, clip_len: int) -> Tensor:
    """Global max over (t, h, w) of the camera feature map.

    Input is frame-batched (B*t, c, h, w); output is one vector per clip.
    """
    n, c, h, w = f_cam_map.shape
    if n % clip_len:
        raise T.ShapeError(
            f"frame axis {n} is not a multiple of clip length {clip_len}"
        )
    grouped = T.reshape(f_cam_map, (n // clip_len, clip_len, c, h, w))
    return T.reduce_max(grouped, axes=(1, 3, 4))


_NORM_FLOOR = 1e-12


def disentangling_loss(
    f_id: Tensor, f_cam: Tensor, margin: float = 0.0
) -> tuple[Tensor, np.ndarray]:
    """Clamped cosine similarity between identity and camera vectors.

    Per row: max(cos(f_id, f_cam) - margin, 0); mean over the batch.  Rows
    where either vector is numerically zero contribute exactly zero with zero
    gradient and are returned as a degenerate-row mask.
    """
    if f_id.ndim != 2 or f_cam.ndim != 2 or f_id.shape != f_cam.shape:
        raise T.ShapeError(
            f"disentangling_loss expects matching (B, c) inputs, "
            f"got {f_id.shape} and {f_cam.shape}"
        )
    # +1e-24 keeps sqrt smooth at zero so masked rows backpropagate clean zeros
    na = T.sqrt(T.reduce_sum(f_id * f_id, axes=(1,)) + 1e-24)
    nb = T.sqrt(T.reduce_sum(f_cam * f_cam, axes=(1,)) + 1e-24)
    # strict: an exactly-zero row lands on the floor (sqrt(1e-24)) and must flag
    valid = (na.data > _NORM_FLOOR) & (nb.data > _NORM_FLOOR)
    if not valid.all():
        log.warning(
            "disentangling_loss: %d degenerate row(s) contribute zero",
            int((~valid).sum()),
        )
    mask = Tensor(valid.astype(f_id.dtype))
    cos = T.reduce_sum(f_id * f_cam, axes=(1,)) / (na * nb)
    clamped = T.relu(cos - margin) * mask
    return T.reduce_mean(clamped, axes=(0,)), ~valid


def camera_ce_loss(f_cam: Tensor, camera_labels, classifier: Linear) -> Tensor:
    """Mean cross-entropy of the camera classifier on camera vectors."""
    from .nn import cross_entropy

    return cross_entropy(classifier(f_cam), camera_labels)
