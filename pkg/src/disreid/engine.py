"""Optimization, the training loop, checkpoints, and the metrics stream.

Adam with bias correction and coupled L2 weight decay (decoupled behind a
flag), a step lr schedule, and a Trainer that wires the sampler, the model
forward, the loss composition, and JSONL metrics together.  Three RNG streams
(sampler, augment, switch) are spawned from the seed so that toggling one
component never perturbs another's draws.  Checkpoints capture parameters,
buffers, optimizer state, and RNG states; resuming reproduces the
uninterrupted run bitwise in double precision.
"""

from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import ConfigError, camera_ce_loss, disentangling_loss
from .fwg import frame_weight_loss
from .model import DisentangledReidNet, ModelConfig
from .nn import cross_entropy
from .objective import (
    ALL_COMPONENTS,
    LossReport,
    compose_ce,
    compose_total,
    intra_class_loss,
    triplet_loss,
    validate_components,
)
from .sao import switched_ce_loss
from .tensor_io import VERSION_F32, VERSION_F64, dstn_bytes, dstn_from_bytes
from .tlm import lr_loss
from .synth import augment_clip, pk_batches, rrs_sample

log = logging.getLogger(__name__)


class EngineError(RuntimeError):
    """Training aborted: non-finite loss or rejected step."""


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 3.5e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 40
    weight_decay: float = 5e-4
    decoupled_wd: bool = False
    aux_scale: float = 0.1
    cam_scale: float | None = None
    triplet_margin: float = 0.3
    dis_margin: float = 0.0
    components: frozenset[str] = ALL_COMPONENTS
    frames_per_clip: int = 4
    p_identities: int = 8
    k_clips: int = 4
    batches_per_epoch: int | None = None
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.components = validate_components(self.components)
        if self.epochs < 0 or self.base_lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("epochs >= 0, base_lr > 0, lr_decay in (0, 1] required")
        if self.lr_step_epochs < 1:
            raise ConfigError(f"lr_step_epochs must be >= 1, got {self.lr_step_epochs}")
        if self.p_identities < 2 or self.k_clips < 2:
            raise ConfigError(
                "need at least 2 identities and 2 clips per identity in a batch"
            )


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: base_lr * lr_decay ^ floor(epoch / lr_step_epochs)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.base_lr * config.lr_decay ** (epoch // config.lr_step_epochs)


class Adam:
    """Adam with bias correction; L2 is coupled into the gradient by default."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params: dict[str, T.Tensor], weight_decay: float = 0.0,
                 decoupled: bool = False):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        # validate before touching any state so a rejected step changes nothing
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise EngineError(f"step rejected: non-finite gradient in {name}")
        self.t += 1
        bc1 = 1.0 - self.BETA1 ** self.t
        bc2 = 1.0 - self.BETA2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self.m[name] = self.BETA1 * self.m[name] + (1 - self.BETA1) * g
            v = self.v[name] = self.BETA2 * self.v[name] + (1 - self.BETA2) * (g * g)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.EPS)
            if self.weight_decay and self.decoupled:
                update = update + lr * self.weight_decay * p.data
            p.data = p.data - update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def batch_objective(
    model: DisentangledReidNet,
    frames: np.ndarray,
    ids: np.ndarray,
    cams: np.ndarray,
    config: TrainConfig,
    permutation: np.ndarray | None = None,
    weight_targets: np.ndarray | None = None,
) -> tuple[T.Tensor, LossReport]:
    """Forward a batch and compose the enabled loss terms.

    ``permutation`` fixes the camera-switch ordering and ``weight_targets``
    pins the frame-weight pseudo-labels (the trainer leaves both to be drawn
    or computed; gradient checks pin them).
    """
    enabled = config.components
    need_cam = bool({"l_dis", "l_cam", "sao"} & enabled)
    feats = model.forward_clips(
        frames,
        labels=ids,
        enabled=enabled,
        need_camera=need_cam,
        need_sides="l_lr" in enabled and "tlm" in enabled,
        need_targets="l_w" in enabled and "fwg" in enabled,
        weight_targets=weight_targets,
    )
    ce_id = cross_entropy(model.id_head(feats.f_id), ids)
    report = LossReport(ce_id=ce_id.item())

    ce_aug: T.Tensor | float = 0.0
    if "sao" in enabled and feats.f_cam is not None:
        if permutation is None:
            raise ConfigError("switch-and-aggregate needs a permutation")
        switched = switch_and_aggregate_fixed(feats.f_id, feats.f_cam, ids, permutation)
        ce_aug = switched_ce_loss(switched, model.id_head)
        report.ce_aug = ce_aug.item()

    ce_lr: T.Tensor | float = 0.0
    if feats.side_left is not None:
        ce_lr = lr_loss(feats.side_left, feats.side_right, ids, model.id_head)
        report.ce_lr = ce_lr.item()

    ce_cam: T.Tensor | float = 0.0
    if "l_cam" in enabled:
        ce_cam = camera_ce_loss(feats.f_cam, cams, model.cam_head)
        report.ce_cam = ce_cam.item()

    # triplet and identity CE form the base objective; no flag governs them
    tri = triplet_loss(feats.f_id, ids, margin=config.triplet_margin)
    report.tri = tri.item()

    dis: T.Tensor | float = 0.0
    if "l_dis" in enabled:
        dis, _ = disentangling_loss(feats.f_id, feats.f_cam, margin=config.dis_margin)
        report.dis = dis.item()

    ic: T.Tensor | float = 0.0
    if "l_ic" in enabled:
        ic = intra_class_loss(feats.f_id, ids)
        report.ic = ic.item()

    w_loss: T.Tensor | float = 0.0
    if feats.weight_targets is not None:
        w_loss = frame_weight_loss(feats.weight_targets, feats.weights)
        report.w_loss = w_loss.item()

    ce = compose_ce(ce_id, ce_aug, ce_lr, ce_cam, config.aux_scale, config.cam_scale)
    total = compose_total(ce, tri, dis, ic, w_loss, config.aux_scale)
    report.total = total.item()
    return total, report


def switch_and_aggregate_fixed(f_id, f_cam, ids, permutation):
    """switch_and_aggregate with a caller-supplied permutation."""
    from .sao import SwitchedBatch

    permutation = np.asarray(permutation)
    b = f_id.shape[0]
    if permutation.shape != (b,) or sorted(permutation.tolist()) != list(range(b)):
        raise ConfigError(f"not a permutation of {b} rows: {permutation}")
    augmented = f_id + T.take(f_cam, permutation)
    return SwitchedBatch(augmented=augmented, permutation=permutation,
                         labels=np.asarray(ids).copy())


class Trainer:
    """Drives P*K sampling, forward/backward, Adam, and metrics emission."""

    def __init__(
        self,
        model: DisentangledReidNet,
        tracklets: list,
        config: TrainConfig,
        out_dir: str | Path | None = None,
    ):
        if not tracklets:
            raise ConfigError("no training tracklets")
        self.model = model
        self.tracklets = tracklets
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[dict] = []
        self.epoch = 0
        self.global_step = 0
        self.adam = Adam(
            model.parameters(),
            weight_decay=config.weight_decay,
            decoupled=config.decoupled_wd,
        )
        seq = np.random.SeedSequence(config.seed)
        s_sampler, s_augment, s_switch = seq.spawn(3)
        self.sampler_rng = np.random.default_rng(s_sampler)
        self.augment_rng = np.random.default_rng(s_augment)
        self.switch_rng = np.random.default_rng(s_switch)
        self._metrics_fp = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- batches -------------------------------------------------------

    def _assemble(self, batch: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.config.frames_per_clip
        clips, ids, cams = [], [], []
        for tracklet in batch:
            idx = rrs_sample(len(tracklet.frames), t, self.sampler_rng)
            clip = tracklet.frames[idx]
            if self.config.augment:
                clip = augment_clip(clip, self.augment_rng)
            clips.append(clip)
            ids.append(tracklet.person_id)
            cams.append(tracklet.camera_id)
        frames = np.stack(clips).astype(T.default_dtype())
        return frames, np.asarray(ids), np.asarray(cams)

    def train_step(self, frames, ids, cams) -> LossReport:
        permutation = None
        if "sao" in self.config.components and frames.shape[0] >= 2:
            permutation = self.switch_rng.permutation(frames.shape[0])
        self.adam.zero_grad()
        total, report = batch_objective(
            self.model, frames, ids, cams, self.config, permutation=permutation
        )
        bad = report.non_finite_terms()
        if bad:
            raise EngineError(f"non-finite loss component(s): {', '.join(bad)}")
        total.backward()
        self.adam.step(lr_at(self.epoch, self.config))
        self.global_step += 1
        return report

    def run(self) -> list[dict]:
        label_map = self._label_maps()
        # feature extraction flips the model to eval mode; undo that here so
        # resumed or interleaved runs keep updating normalization statistics
        self.model.train()
        try:
            if self.out_dir is not None:
                self._metrics_fp = open(self.out_dir / "metrics.jsonl", "a")
            while self.epoch < self.config.epochs:
                for batch in pk_batches(
                    self.tracklets,
                    self.config.p_identities,
                    self.config.k_clips,
                    self.sampler_rng,
                    batches=self.config.batches_per_epoch,
                ):
                    frames, ids, cams = self._assemble(batch)
                    report = self.train_step(
                        frames, label_map[0][ids], label_map[1][cams]
                    )
                    self._record(report)
                self.epoch += 1
        finally:
            if self._metrics_fp is not None:
                self._metrics_fp.close()
                self._metrics_fp = None
        return self.history

    def _label_maps(self):
        """Raw person/camera ids -> dense training label indices."""
        pids = sorted({t.person_id for t in self.tracklets})
        cams = sorted({t.camera_id for t in self.tracklets})
        if len(pids) != self.model.config.num_ids:
            raise ConfigError(
                f"model has {self.model.config.num_ids} identity outputs but the "
                f"corpus has {len(pids)} training identities"
            )
        if len(cams) != self.model.config.num_cameras:
            raise ConfigError(
                f"model has {self.model.config.num_cameras} camera outputs but the "
                f"corpus has {len(cams)} cameras"
            )
        pid_map = np.full(max(pids) + 1, -1)
        for i, p in enumerate(pids):
            pid_map[p] = i
        cam_map = np.full(max(cams) + 1, -1)
        for i, c in enumerate(cams):
            cam_map[c] = i
        return pid_map, cam_map

    def _record(self, report: LossReport) -> None:
        row = {
            "step": self.global_step,
            "epoch": self.epoch,
            "lr": lr_at(self.epoch, self.config),
        }
        row.update(report.to_dict())
        self.history.append(row)
        if self._metrics_fp is not None:
            self._metrics_fp.write(json.dumps(row) + "\n")
            self._metrics_fp.flush()

    # -- checkpoints ---------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        save_checkpoint(path, self)

    def load_checkpoint(self, path: str | Path) -> None:
        load_checkpoint(path, self)


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)  # fixed so identical state gives identical bytes


def _config_echo(config: TrainConfig) -> dict:
    echo = asdict(config)
    echo["components"] = sorted(config.components)
    return echo


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    """Write a DSTN-container checkpoint (zip of meta.json + tensor entries)."""
    model = trainer.model
    version = (
        VERSION_F64 if T.default_dtype() == np.float64 else VERSION_F32
    )
    meta = {
        "format": "checkpoint",
        "epoch": trainer.epoch,
        "global_step": trainer.global_step,
        "adam_t": trainer.adam.t,
        "rng": {
            "sampler": trainer.sampler_rng.bit_generator.state,
            "augment": trainer.augment_rng.bit_generator.state,
            "switch": trainer.switch_rng.bit_generator.state,
        },
        "config": _config_echo(trainer.config),
        "model": {
            "channels": model.config.channels,
            "strides": list(model.config.strides),
            "num_ids": model.config.num_ids,
            "num_cameras": model.config.num_cameras,
            "input_hw": list(model.config.input_hw),
            "dis_margin": model.config.dis_margin,
            "pseudo_mode": model.config.pseudo_mode,
            "predictor_mode": model.config.predictor_mode,
        },
    }
    entries: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        entries[f"params/{name}"] = p.data
    for name, b in model.buffers().items():
        entries[f"buffers/{name}"] = b
    for name, m in trainer.adam.m.items():
        entries[f"adam_m/{name}"] = m
    for name, v in trainer.adam.v.items():
        entries[f"adam_v/{name}"] = v
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(entries):
            info = zipfile.ZipInfo(f"tensors/{name}.dstn", date_time=_ZIP_DATE)
            zf.writestr(info, dstn_bytes(entries[name], version=version))


def _read_checkpoint_container(path: str | Path) -> tuple[dict, dict]:
    """Pull meta.json and every tensor entry out of a checkpoint zip.  Any
    file that is not a checkpoint container fails with one uniform error."""
    try:
        with zipfile.ZipFile(path) as zf:
            try:
                meta = json.loads(zf.read("meta.json"))
            except KeyError:
                raise EngineError(f"{path} is not a checkpoint container") from None
            if meta.get("format") != "checkpoint":
                raise EngineError(f"{path} is not a checkpoint container")
            tensors = {}
            for entry in zf.namelist():
                if entry.startswith("tensors/") and entry.endswith(".dstn"):
                    key = entry[len("tensors/") : -len(".dstn")]
                    tensors[key] = dstn_from_bytes(zf.read(entry))
    except zipfile.BadZipFile:
        raise EngineError(f"{path} is not a checkpoint container") from None
    return meta, tensors


def load_model_checkpoint(path: str | Path) -> tuple[DisentangledReidNet, dict]:
    """Rebuild just the model from a checkpoint (evaluation does not need
    optimizer or RNG state)."""
    meta, tensors = _read_checkpoint_container(path)
    m = meta["model"]
    config = ModelConfig(
        channels=m["channels"],
        strides=tuple(m["strides"]),
        num_ids=m["num_ids"],
        num_cameras=m["num_cameras"],
        input_hw=tuple(m["input_hw"]),
        dis_margin=m["dis_margin"],
        pseudo_mode=m["pseudo_mode"],
        predictor_mode=m["predictor_mode"],
    )
    model = DisentangledReidNet(config, np.random.default_rng(0))
    dtype = T.default_dtype()
    for name, p in model.parameters().items():
        arr = tensors.get(f"params/{name}")
        if arr is None:
            raise ValueError(f"checkpoint missing parameter {name}")
        if arr.shape != p.data.shape:
            raise ValueError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arr.astype(dtype)
    for name, b in model.buffers().items():
        arr = tensors.get(f"buffers/{name}")
        if arr is None:
            raise ValueError(f"checkpoint missing buffer {name}")
        b[...] = arr.astype(dtype)
    return model, meta


def load_checkpoint(path: str | Path, trainer: Trainer) -> dict:
    """Restore trainer/model state from a checkpoint; returns its meta dict."""
    model = trainer.model
    meta, tensors = _read_checkpoint_container(path)
    params = model.parameters()
    buffers = model.buffers()
    dtype = T.default_dtype()
    for name, p in params.items():
        arr = tensors.get(f"params/{name}")
        if arr is None:
            raise ValueError(f"checkpoint missing parameter {name}")
        if arr.shape != p.data.shape:
            raise ValueError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arr.astype(dtype)
    for name, b in buffers.items():
        arr = tensors.get(f"buffers/{name}")
        if arr is None:
            raise ValueError(f"checkpoint missing buffer {name}")
        b[...] = arr.astype(dtype)
    for name in params:
        trainer.adam.m[name] = tensors[f"adam_m/{name}"].astype(dtype)
        trainer.adam.v[name] = tensors[f"adam_v/{name}"].astype(dtype)
    trainer.adam.t = meta["adam_t"]
    trainer.epoch = meta["epoch"]
    trainer.global_step = meta["global_step"]
    trainer.sampler_rng.bit_generator.state = meta["rng"]["sampler"]
    trainer.augment_rng.bit_generator.state = meta["rng"]["augment"]
    trainer.switch_rng.bit_generator.state = meta["rng"]["switch"]
    return meta
