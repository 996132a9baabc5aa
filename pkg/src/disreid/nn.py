"""Parameter-holding layers on top of the tensor core.

A deliberately small Module system: parameters and buffers are registered
explicitly, submodules are found by attribute scan, and train/eval is a
recursive flag.  No hooks, no serialization here (checkpoints handle that).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def register_parameter(self, name: str, value: Tensor) -> Tensor:
        value.requires_grad = True
        self._params[name] = value
        return value

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + name: p for name, p in self._params.items()}
        for child_name, child in self._children():
            out.update(child.parameters(prefix=f"{prefix}{child_name}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: b for name, b in self._buffers.items()}
        for child_name, child in self._children():
            out.update(child.buffers(prefix=f"{prefix}{child_name}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_stat_updates(self, flag: bool) -> None:
        """Enable/disable running-statistic updates (norm layers)."""
        for _, child in self._children():
            child.set_stat_updates(flag)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


class Linear(Module):
    """Bias-free linear map x (B, in) -> x W^T (B, out)."""

    def __init__(self, out_features: int, in_features: int, rng: np.random.Generator):
        super().__init__()
        self.out_features = out_features
        self.in_features = in_features
        scale = np.sqrt(1.0 / in_features)
        self.weight = self.register_parameter(
            "weight", Tensor(rng.normal(0.0, scale, size=(out_features, in_features)))
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.weight))


class Conv2d(Module):
    """Bias-free 2-d convolution layer; padding defaults to 'same' (k // 2)."""

    def __init__(
        self,
        out_channels: int,
        in_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
    ):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        scale = np.sqrt(2.0 / fan_in)  # He init for the ReLU stacks
        self.weight = self.register_parameter(
            "weight",
            Tensor(
                rng.normal(
                    0.0, scale, size=(out_channels, in_channels, kernel_size, kernel_size)
                )
            ),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class ChannelNorm(Module):
    """Per-channel normalization by running statistics.

    Every sample is normalized with the layer's current running mean/variance,
    which are shared constants: nothing couples samples within a batch, and
    the gradient treats the statistics as fixed.  During training the running
    averages then absorb the batch statistics (computed over samples and
    spatial positions); in eval mode they are frozen.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.update_stats = True
        self.scale = self.register_parameter("scale", Tensor(np.ones(channels)))
        self.shift = self.register_parameter("shift", Tensor(np.zeros(channels)))
        self.running_mean = self.register_buffer("running_mean", np.zeros(channels))
        self.running_var = self.register_buffer("running_var", np.ones(channels))

    def set_stat_updates(self, flag: bool) -> None:
        self.update_stats = flag

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"ChannelNorm expects (N,C,H,W), got {x.ndim}-d")
        if x.shape[1] != self.channels:
            raise T.ShapeError(
                f"ChannelNorm: channel axis 1 is {x.shape[1]}, layer has {self.channels}"
            )
        # snapshot before the update: normalization must not depend on the
        # current batch, only on shared constants
        mean = Tensor(self.running_mean.reshape(1, self.channels, 1, 1).copy())
        inv = Tensor(
            1.0 / np.sqrt(self.running_var.reshape(1, self.channels, 1, 1) + self.eps)
        )
        if self.training and self.update_stats:
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * x.data.mean(axis=(0, 2, 3))
            self.running_var *= 1.0 - m
            self.running_var += m * x.data.var(axis=(0, 2, 3))
        gamma = T.reshape(self.scale, (1, self.channels, 1, 1))
        beta = T.reshape(self.shift, (1, self.channels, 1, 1))
        return (x - mean) * inv * gamma + beta


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range [0, {num_classes}): "
            f"min {labels.min()}, max {labels.max()}"
        )
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    if logits.ndim != 2:
        raise T.ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape[0] != logits.shape[0]:
        raise T.ShapeError(
            f"cross_entropy: batch axis 0 mismatch "
            f"(logits {logits.shape[0]}, labels {labels.shape[0]})"
        )
    lse = T.logsumexp(logits, axes=(1,))
    picked = T.reduce_sum(logits * Tensor(one_hot(labels, logits.shape[1])), axes=(1,))
    return T.reduce_mean(lse - picked, axes=(0,))
