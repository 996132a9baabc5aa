"""Flat ``key = value`` run configuration.

One registry defines every key with its type, default, and help line; unknown
keys are rejected with the full list of valid ones.  A config file is plain
text, one assignment per line, ``#`` comments allowed; ``--set key=value``
overrides stack on top.  The effective configuration is echoed into run.json
by every command.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .backbone import ConfigError
from .engine import TrainConfig
from .model import ModelConfig
from .objective import ALL_COMPONENTS, validate_components
from .synth import SynthSpec

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean (true/false), got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated integer list")
    return tuple(int(p) for p in parts)


def _parse_str_set(raw: str) -> frozenset[str]:
    low = raw.strip().lower()
    if low in ("", "none"):
        return frozenset()
    if low == "all":
        return frozenset(ALL_COMPONENTS)
    return frozenset(p.strip() for p in raw.split(",") if p.strip())


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapped(raw: str):
        if raw.strip().lower() in ("none", ""):
            return None
        return parse(raw)

    return wrapped


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


_OPTIONS = [
    # corpus
    Option("data.ids", int, 32, "number of identities in the synthetic corpus"),
    Option("data.cameras", int, 4, "number of cameras (must be >= 2)"),
    Option("data.tracklets", int, 2, "tracklets per identity per camera"),
    Option("data.frames", int, 8, "frames per tracklet"),
    Option("data.height", int, 64, "frame height in pixels"),
    Option("data.width", int, 32, "frame width in pixels"),
    Option("data.occlusion", float, 0.15, "per-frame occlusion probability"),
    Option("data.jitter", float, 0.06, "bounding-box jitter amplitude (fraction)"),
    Option("data.noise", float, 0.02, "background noise sigma"),
    Option("data.train_fraction", float, 0.5, "fraction of identities used for training"),
    Option("data.seed", int, 0, "corpus generation seed"),
    # backbone / model
    Option("backbone.c", int, 64, "final backbone width; must be divisible by 8"),
    Option("backbone.strides", _parse_int_list, (2, 2, 2, 1), "per-stage strides"),
    Option("backbone.norm", str, "channel", "normalization layer family",
           choices=("channel",)),
    Option("model.pseudo", str, "softmax", "pseudo-label conversion",
           choices=("softmax", "sumnorm")),
    Option("model.predictor", str, "reverse", "frame-weight predictor output mode",
           choices=("reverse", "direct")),
    # sampler
    Option("sampler.p", int, 8, "identities per batch"),
    Option("sampler.k", int, 4, "clips per identity per batch"),
    Option("sampler.frames", int, 4, "frames per sampled clip (T)"),
    Option("sampler.batches", _optional(int), None,
           "batches per epoch; default covers the tracklet count"),
    # optimization
    Option("train.epochs", int, 20, "training epochs"),
    Option("train.lr", float, 3.5e-4, "base learning rate"),
    Option("train.lr_decay", float, 0.1, "step-schedule decay factor"),
    Option("train.lr_step", int, 40, "epochs between decay steps"),
    Option("train.weight_decay", float, 5e-4, "L2 strength"),
    Option("train.decoupled", _parse_bool, False,
           "apply weight decay decoupled from the gradient"),
    Option("train.lambda", float, 0.1, "auxiliary loss scale"),
    Option("train.lambda_cam", _optional(float), None,
           "camera CE scale; defaults to train.lambda"),
    Option("train.triplet_margin", float, 0.3, "triplet hinge margin"),
    Option("train.dis_margin", float, 0.0, "disentangling cosine margin"),
    Option("train.components", _parse_str_set, frozenset(ALL_COMPONENTS),
           "enabled components, comma-separated (or 'all'/'none')"),
    Option("train.augment", _parse_bool, True, "flip + erasing augmentation"),
    Option("train.precision", str, "float64", "training float width",
           choices=("float64", "float32")),
    Option("train.seed", int, 0, "training run seed"),
    # evaluation
    Option("eval.topk", int, 20, "CMC curve depth"),
    # dumps
    Option("dump.attention", _parse_bool, False,
           "write per-clip attention maps under dumps/attn/"),
    Option("dump.fwg", _parse_bool, False,
           "write per-clip frame weights as JSON lines under dumps/fwg/"),
    Option("dump.embeddings", _parse_bool, False,
           "write query/gallery embeddings as DSTN tensors"),
    Option("dump.ranking", _parse_bool, False, "write per-query ranking CSV"),
    # ablation
    Option("ablate.seeds", _parse_int_list, (0, 1, 2), "seeds per ablation row"),
    Option("ablate.epochs", _optional(int), None,
           "epoch override for ablation rows; defaults to train.epochs"),
    Option("ablate.jobs", int, 1, "parallel row workers (1 = sequential)"),
]

REGISTRY: dict[str, Option] = {o.key: o for o in _OPTIONS}


class Config:
    """Typed view over the flat key space."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = dict(values or {})
        for key in self._values:
            if key not in REGISTRY:
                raise ConfigError(_unknown_key_message(key))

    def __getitem__(self, key: str):
        if key not in REGISTRY:
            raise ConfigError(_unknown_key_message(key))
        if key in self._values:
            return self._values[key]
        return REGISTRY[key].default

    def is_set(self, key: str) -> bool:
        """True when the key was given explicitly (file or override)."""
        if key not in REGISTRY:
            raise ConfigError(_unknown_key_message(key))
        return key in self._values

    def set(self, key: str, raw: str) -> None:
        if key not in REGISTRY:
            raise ConfigError(_unknown_key_message(key))
        option = REGISTRY[key]
        try:
            value = option.parse(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        if option.choices is not None and value not in option.choices:
            raise ConfigError(
                f"bad value for {key}: {value!r} not one of {list(option.choices)}"
            )
        self._values[key] = value

    def effective(self) -> dict[str, Any]:
        """Every key with its resolved value, JSON-serializable."""
        out = {}
        for key in sorted(REGISTRY):
            value = self[key]
            if isinstance(value, frozenset):
                value = sorted(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[key] = value
        return out


def _unknown_key_message(key: str) -> str:
    valid = ", ".join(sorted(REGISTRY))
    return f"unknown config key {key!r}; valid keys: {valid}"


def parse_assignment(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected key = value, got {line!r}")
    key, _, raw = line.partition("=")
    return key.strip(), raw.strip()


def load_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> Config:
    """Read a flat config file, then apply ``--set`` overrides in order."""
    config = Config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            try:
                key, raw = parse_assignment(stripped)
                config.set(key, raw)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    for item in overrides or []:
        key, raw = parse_assignment(item)
        config.set(key, raw)
    return config


# -- builders ----------------------------------------------------------


def to_synth_spec(config: Config) -> SynthSpec:
    return SynthSpec(
        num_ids=config["data.ids"],
        num_cameras=config["data.cameras"],
        tracklets_per_id_per_camera=config["data.tracklets"],
        frames_per_tracklet=config["data.frames"],
        height=config["data.height"],
        width=config["data.width"],
        occlusion_prob=config["data.occlusion"],
        jitter=config["data.jitter"],
        background_noise=config["data.noise"],
        train_id_fraction=config["data.train_fraction"],
        seed=config["data.seed"],
    )


def to_model_config(
    config: Config,
    num_ids: int,
    num_cameras: int,
    input_hw: tuple[int, int] | None = None,
) -> ModelConfig:
    """``input_hw`` comes from the actual corpus when one is loaded."""
    return ModelConfig(
        channels=config["backbone.c"],
        strides=tuple(config["backbone.strides"]),
        num_ids=num_ids,
        num_cameras=num_cameras,
        input_hw=input_hw or (config["data.height"], config["data.width"]),
        dis_margin=config["train.dis_margin"],
        pseudo_mode=config["model.pseudo"],
        predictor_mode=config["model.predictor"],
    )


def to_train_config(config: Config, components: frozenset[str] | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=config["train.epochs"],
        base_lr=config["train.lr"],
        lr_decay=config["train.lr_decay"],
        lr_step_epochs=config["train.lr_step"],
        weight_decay=config["train.weight_decay"],
        decoupled_wd=config["train.decoupled"],
        aux_scale=config["train.lambda"],
        cam_scale=config["train.lambda_cam"],
        triplet_margin=config["train.triplet_margin"],
        dis_margin=config["train.dis_margin"],
        components=validate_components(
            components if components is not None else config["train.components"]
        ),
        frames_per_clip=config["sampler.frames"],
        p_identities=config["sampler.p"],
        k_clips=config["sampler.k"],
        batches_per_epoch=config["sampler.batches"],
        augment=config["train.augment"],
        seed=config["train.seed"],
    )
