"""Disentangled video person re-identification, from tensors up.

The package separates what a clip shows (identity) from where it was filmed
(camera) by training two feature branches against each other, localizes the
target inside each frame with overlapping spatial attention, weights frames by
how recognizable the target is in them, and augments training batches by
recombining identity features with other clips' camera features.  Everything
runs on a small numpy-backed reverse-mode tensor core; every loss is held to
finite-difference gradient checks.
"""

from .backbone import ConfigError
from .engine import Adam, EngineError, TrainConfig, Trainer
from .estimator import DisentangledVideoReid
from .gradcheck import finite_diff_check
from .model import DisentangledReidNet, ModelConfig
from .objective import ALL_COMPONENTS
from .retrieval import cmc_map, cosine_distance_matrix, probe_accuracy
from .synth import Corpus, SynthSpec, Tracklet, generate_corpus
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    no_grad,
    set_checked,
    set_default_dtype,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_COMPONENTS",
    "Adam",
    "ConfigError",
    "Corpus",
    "DisentangledReidNet",
    "DisentangledVideoReid",
    "EngineError",
    "ModelConfig",
    "NonFiniteError",
    "ShapeError",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "Tracklet",
    "Trainer",
    "cmc_map",
    "cosine_distance_matrix",
    "finite_diff_check",
    "generate_corpus",
    "no_grad",
    "probe_accuracy",
    "set_checked",
    "set_default_dtype",
    "__version__",
]
