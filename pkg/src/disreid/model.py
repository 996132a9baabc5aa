"""The full disentangled video re-identification network.

Forward pass per batch of clips (B, t, 3, H, W):

  backbone -> mid features X and identity map F_ID        (per frame)
  channel expansion on X -> camera map, max-pooled to f_cam (per clip)
  target localization on F_ID -> attended map F_t          (per frame)
  spatial max-pool -> frame vectors f_t (B, c, t)
  frame weight prediction -> w_hat; weighted sum -> f_ID   (per clip)

Components can be switched off structurally (attention becomes identity,
weights become uniform) while their parameters stay allocated, so the
parameter census is invariant to the enabled set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import (
    Backbone,
    BackboneConfig,
    ChannelExpansion,
    ConfigError,
    camera_vector,
)
from .fwg import FrameWeightPredictor, pseudo_label
from .nn import Linear, Module
from .objective import ALL_COMPONENTS, validate_components
from .tensor import Tensor
from .tlm import TargetLocalization, side_vectors


@dataclass
class ModelConfig:
    channels: int = 64
    strides: tuple[int, int, int, int] = (2, 2, 2, 1)
    num_ids: int = 16
    num_cameras: int = 4
    input_hw: tuple[int, int] = (64, 32)
    dis_margin: float = 0.0
    pseudo_mode: str = "softmax"
    predictor_mode: str = "reverse"

    def __post_init__(self):
        if self.num_ids < 2:
            raise ConfigError(f"need at least 2 identities, got {self.num_ids}")
        if self.num_cameras < 2:
            raise ConfigError(
                f"need at least 2 cameras for the camera branch, got {self.num_cameras}"
            )
        backbone = BackboneConfig(self.channels, self.strides)
        h, w = self.input_hw
        backbone.validate_input(h, w)
        if (w // self.total_downsample()) % 4:
            raise ConfigError(
                f"feature width {w // self.total_downsample()} must be divisible "
                f"by 4 for region attention (input width {w})"
            )

    def total_downsample(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


@dataclass
class ClipFeatures:
    """Everything the objective and the dumps consume, still on the tape."""

    f_id: Tensor                        # (B, c)
    frame_vectors: Tensor               # (B, c, t)
    weights: Tensor                     # (B, t) predicted frame weights
    weight_scores: Tensor | None = None  # (B, t) raw predictor scores
    weight_targets: np.ndarray | None = None  # (B, t) pseudo-labels, constant
    f_cam: Tensor | None = None         # (B, c)
    attention: Tensor | None = None     # (B*t, h, w) fused attention maps
    side_left: Tensor | None = None     # (B, c) clip-level left vectors
    side_right: Tensor | None = None    # (B, c)


class DisentangledReidNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.backbone = Backbone(
            BackboneConfig(config.channels, config.strides), rng
        )
        self.expansion = ChannelExpansion(config.channels, rng)
        self.localization = TargetLocalization(rng)
        self.frame_weights = FrameWeightPredictor(
            config.channels, rng, mode=config.predictor_mode
        )
        self.id_head = Linear(config.num_ids, config.channels, rng)
        self.cam_head = Linear(config.num_cameras, config.channels, rng)

    def forward_clips(
        self,
        frames: np.ndarray,
        labels: np.ndarray | None = None,
        enabled: frozenset[str] = ALL_COMPONENTS,
        need_camera: bool = True,
        need_sides: bool = False,
        need_targets: bool = False,
        weight_targets: np.ndarray | None = None,
    ) -> ClipFeatures:
        """Run a batch of clips; ``frames`` is (B, t, 3, H, W).

        ``weight_targets`` pins the frame-weight pseudo-labels instead of
        recomputing them; they are constants (never differentiated through),
        so gradient checks must hold them fixed while perturbing parameters.
        """
        enabled = validate_components(enabled)
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise T.ShapeError(
                f"forward_clips expects (B, t, 3, H, W), got {frames.shape}"
            )
        b, t = frames.shape[:2]
        x = Tensor(frames.reshape(b * t, *frames.shape[2:]))
        mid, f_id_map = self.backbone(x)

        attention = None
        if "tlm" in enabled:
            attended, attention = self.localization(f_id_map)
        else:
            attended = f_id_map

        per_frame = T.reduce_max(attended, axes=(2, 3))          # (B*t, c)
        frame_vectors = T.transpose(
            T.reshape(per_frame, (b, t, self.config.channels)), (0, 2, 1)
        )                                                        # (B, c, t)

        scores = None
        if "fwg" in enabled:
            weights, scores = self.frame_weights(frame_vectors)
        else:
            weights = Tensor(np.full((b, t), 1.0 / t))
        f_id = T.reduce_sum(
            frame_vectors * T.reshape(weights, (b, 1, t)), axes=(2,)
        )

        targets = None
        if need_targets:
            if weight_targets is not None:
                targets = np.asarray(weight_targets)
            else:
                if labels is None:
                    raise ConfigError("pseudo-labels need identity labels")
                with T.no_grad():
                    targets = pseudo_label(
                        frame_vectors.data,
                        labels,
                        self.id_head.weight.data,
                        mode=self.config.pseudo_mode,
                    )

        f_cam = None
        if need_camera:
            f_cam = camera_vector(self.expansion(mid), t)

        side_left = side_right = None
        if need_sides:
            left, right = side_vectors(attended)
            side_left = T.reduce_max(
                T.reshape(left, (b, t, self.config.channels)), axes=(1,)
            )
            side_right = T.reduce_max(
                T.reshape(right, (b, t, self.config.channels)), axes=(1,)
            )

        return ClipFeatures(
            f_id=f_id,
            frame_vectors=frame_vectors,
            weights=weights,
            weight_scores=scores,
            weight_targets=targets,
            f_cam=f_cam,
            attention=attention,
            side_left=side_left,
            side_right=side_right,
        )

    def extract(
        self, frames: np.ndarray, enabled: frozenset[str] = ALL_COMPONENTS,
        need_camera: bool = True, collect_attention: bool = False,
    ) -> dict[str, np.ndarray]:
        """Eval-mode feature extraction; returns plain arrays."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                feats = self.forward_clips(
                    frames, enabled=enabled, need_camera=need_camera,
                )
        finally:
            self.train(was_training)
        out = {
            "f_id": feats.f_id.data,
            "weights": feats.weights.data,
            "frame_vectors": feats.frame_vectors.data,
        }
        if feats.f_cam is not None:
            out["f_cam"] = feats.f_cam.data
        if collect_attention and feats.attention is not None:
            out["attention"] = feats.attention.data
        return out
