"""scikit-learn style facade: fit on clip arrays, transform to embeddings.

``DisentangledVideoReid`` wraps corpus handling, model construction, and the
training loop behind the familiar estimator contract: constructor stores
hyperparameters verbatim, ``fit`` validates and trains, ``transform`` maps
clips to identity embeddings, ``predict`` returns the most likely known
identity.  ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .backbone import ConfigError
from .engine import TrainConfig, Trainer
from .model import DisentangledReidNet, ModelConfig
from .objective import ALL_COMPONENTS, validate_components
from .synth import Tracklet


def check_clip_array(X, name: str = "X") -> np.ndarray:
    """Validate a clip batch: (N, t, 3, H, W), finite, numeric."""
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[2] != 3:
        raise ValueError(
            f"{name} must have shape (n_clips, frames, 3, height, width), "
            f"got {X.shape}"
        )
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {X.dtype}")
    X = X.astype(T.default_dtype())
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_label_array(y, n: int, name: str) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.issubdtype(y.dtype, np.floating) and np.all(y == y.astype(int)):
            y = y.astype(int)
        else:
            raise ValueError(f"{name} must hold integer labels")
    return y.astype(int)


class DisentangledVideoReid(BaseEstimator, TransformerMixin):
    """Video re-identification embeddings with camera disentanglement.

    Parameters mirror the training configuration; see ``fit`` for the data
    contract.  After fitting, ``embedding_size_`` gives the feature width and
    ``classes_`` the known identities.
    """

    def __init__(
        self,
        channels: int = 32,
        strides: tuple[int, int, int, int] = (2, 2, 2, 1),
        components: tuple[str, ...] = tuple(sorted(ALL_COMPONENTS)),
        epochs: int = 10,
        base_lr: float = 3.5e-4,
        weight_decay: float = 5e-4,
        aux_scale: float = 0.1,
        cam_scale: float | None = None,
        triplet_margin: float = 0.3,
        dis_margin: float = 0.0,
        pseudo_mode: str = "softmax",
        predictor_mode: str = "reverse",
        frames_per_clip: int | None = None,
        p_identities: int = 4,
        k_clips: int = 2,
        batches_per_epoch: int | None = None,
        augment: bool = False,
        seed: int = 0,
    ):
        self.channels = channels
        self.strides = strides
        self.components = components
        self.epochs = epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.aux_scale = aux_scale
        self.cam_scale = cam_scale
        self.triplet_margin = triplet_margin
        self.dis_margin = dis_margin
        self.pseudo_mode = pseudo_mode
        self.predictor_mode = predictor_mode
        self.frames_per_clip = frames_per_clip
        self.p_identities = p_identities
        self.k_clips = k_clips
        self.batches_per_epoch = batches_per_epoch
        self.augment = augment
        self.seed = seed

    # -- fitting -------------------------------------------------------

    def fit(self, X, y, camera_ids=None):
        """Train on clips ``X`` (n_clips, frames, 3, H, W) with identity
        labels ``y`` and per-clip ``camera_ids`` (required, >= 2 cameras)."""
        X = check_clip_array(X)
        n = X.shape[0]
        y = check_label_array(y, n, "y")
        if camera_ids is None:
            raise ValueError(
                "camera_ids is required: disentanglement needs at least two cameras"
            )
        cams = check_label_array(camera_ids, n, "camera_ids")
        self.classes_ = np.unique(y)
        self.cameras_ = np.unique(cams)
        if len(self.cameras_) < 2:
            raise ValueError(f"need at least 2 cameras, got {len(self.cameras_)}")
        if len(self.classes_) < 2:
            raise ValueError(f"need at least 2 identities, got {len(self.classes_)}")

        t = X.shape[1] if self.frames_per_clip is None else self.frames_per_clip
        model_config = ModelConfig(
            channels=self.channels,
            strides=tuple(self.strides),
            num_ids=len(self.classes_),
            num_cameras=len(self.cameras_),
            input_hw=(X.shape[3], X.shape[4]),
            dis_margin=self.dis_margin,
            pseudo_mode=self.pseudo_mode,
            predictor_mode=self.predictor_mode,
        )
        train_config = TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            aux_scale=self.aux_scale,
            cam_scale=self.cam_scale,
            triplet_margin=self.triplet_margin,
            dis_margin=self.dis_margin,
            components=validate_components(frozenset(self.components)),
            frames_per_clip=t,
            p_identities=min(self.p_identities, len(self.classes_)),
            k_clips=self.k_clips,
            batches_per_epoch=self.batches_per_epoch,
            augment=self.augment,
            seed=self.seed,
        )
        tracklets = [
            Tracklet(
                frames=X[i].astype(np.float32),
                person_id=int(y[i]),
                camera_id=int(cams[i]),
                index=i,
            )
            for i in range(n)
        ]
        model = DisentangledReidNet(model_config, np.random.default_rng(self.seed))
        trainer = Trainer(model, tracklets, train_config)
        trainer.run()
        self.model_ = model
        self.history_ = trainer.history
        self.embedding_size_ = self.channels
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("this estimator is not fitted yet; call fit first")

    def _batched_extract(self, X: np.ndarray, key: str) -> np.ndarray:
        enabled = validate_components(frozenset(self.components))
        rows = []
        for start in range(0, X.shape[0], 32):
            out = self.model_.extract(
                X[start : start + 32], enabled=enabled,
                need_camera=(key == "f_cam"),
            )
            rows.append(out[key])
        return np.concatenate(rows, axis=0)

    # -- inference -----------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Identity embeddings, one row per clip."""
        self._check_fitted()
        return self._batched_extract(check_clip_array(X), "f_id")

    def camera_transform(self, X) -> np.ndarray:
        """Camera-branch embeddings, one row per clip."""
        self._check_fitted()
        return self._batched_extract(check_clip_array(X), "f_cam")

    def predict(self, X) -> np.ndarray:
        """Most likely known identity for each clip."""
        embeddings = self.transform(X)
        logits = embeddings @ self.model_.id_head.weight.data.T
        return self.classes_[np.argmax(logits, axis=1)]

    def score(self, X, y) -> float:
        """Mean identification accuracy over clips."""
        y = check_label_array(np.asarray(y), np.asarray(X).shape[0], "y")
        return float((self.predict(X) == y).mean())
