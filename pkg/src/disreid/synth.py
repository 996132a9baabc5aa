"""Synthetic video re-identification corpus.

Every camera owns a deterministic procedural background (stripe, checker, or
gradient family with camera-keyed colors) and an occluder style; every person
is a colored figure whose hue and geometry are keyed to the identity.  The
figure translates smoothly through a tracklet with per-frame bounding-box
jitter, and frames are occluded independently with a configured probability.
Identity is therefore carried by the figure alone and camera by the scenery,
which is what makes the disentanglement measurable.

Also here: restricted random sampling of clips, clip-consistent augmentation,
and the P*K identity-balanced batch sampler.
"""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .backbone import ConfigError
from .tensor_io import read_dstn, write_dstn

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_GOLDEN = 0.6180339887498949


@dataclass
class SynthSpec:
    num_ids: int = 32
    num_cameras: int = 4
    tracklets_per_id_per_camera: int = 2
    frames_per_tracklet: int = 8
    height: int = 64
    width: int = 32
    occlusion_prob: float = 0.15
    jitter: float = 0.06
    background_noise: float = 0.02
    train_id_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 4:
            raise ConfigError(f"need at least 4 identities, got {self.num_ids}")
        if self.num_cameras < 2:
            raise ConfigError(
                f"need at least 2 cameras (cross-camera matching), got {self.num_cameras}"
            )
        if self.tracklets_per_id_per_camera < 1:
            raise ConfigError("tracklets_per_id_per_camera must be >= 1")
        if self.frames_per_tracklet < 1:
            raise ConfigError("frames_per_tracklet must be >= 1")
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"frames must be at least 16x16, got {self.height}x{self.width}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        if not 0.0 < self.train_id_fraction < 1.0:
            raise ConfigError(
                f"train_id_fraction must be in (0, 1), got {self.train_id_fraction}"
            )

    @property
    def num_train_ids(self) -> int:
        n = int(round(self.num_ids * self.train_id_fraction))
        return min(max(n, 2), self.num_ids - 2)


@dataclass
class Tracklet:
    frames: np.ndarray          # (t, 3, H, W) float32 in [0, 1]
    person_id: int
    camera_id: int
    index: int
    split: str = ""
    occluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    target_rgb: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    spec: SynthSpec
    train: list[Tracklet]
    query: list[Tracklet]
    gallery: list[Tracklet]

    def split(self, name: str) -> list[Tracklet]:
        if name not in ("train", "query", "gallery"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _style_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def camera_background(spec: SynthSpec, camera_id: int) -> np.ndarray:
    """The camera's fixed procedural backdrop, (3, H, W) in [0, 1]."""
    rng = _style_rng(spec.seed, 1009, camera_id)
    h, w = spec.height, spec.width
    c1 = _hsv(rng.uniform(), 0.5, rng.uniform(0.25, 0.45))
    c2 = _hsv(rng.uniform(), 0.5, rng.uniform(0.6, 0.85))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    family = camera_id % 3
    if family == 0:  # stripes
        period = int(rng.integers(6, 13))
        axis = rng.integers(0, 3)
        coord = ii if axis == 0 else jj if axis == 1 else ii + jj
        mask = (coord // max(period // 2, 1)) % 2
        base = np.where(mask[None], c1[:, None, None], c2[:, None, None])
    elif family == 1:  # checker
        size = int(rng.integers(4, 9))
        mask = (ii // size + jj // size) % 2
        base = np.where(mask[None], c1[:, None, None], c2[:, None, None])
    else:  # gradient
        axis = rng.integers(0, 2)
        ramp = (ii / max(h - 1, 1)) if axis == 0 else (jj / max(w - 1, 1))
        base = c1[:, None, None] + (c2 - c1)[:, None, None] * ramp[None]
    return base.astype(np.float64)


def camera_occluder_style(spec: SynthSpec, camera_id: int) -> dict:
    rng = _style_rng(spec.seed, 1013, camera_id)
    return {
        "color": _hsv(rng.uniform(), 0.85, rng.uniform(0.15, 0.4)),
        "striped": bool(rng.integers(0, 2)),
    }


def person_style(spec: SynthSpec, person_id: int) -> dict:
    """Identity-keyed appearance: hue plus body/head geometry."""
    rng = _style_rng(spec.seed, 2003, person_id)
    hue = (person_id * _GOLDEN) % 1.0
    return {
        "hue": hue,
        "body_color": _hsv(hue, 0.95, 0.95),
        "band_color": _hsv(hue + 0.5, 0.9, 0.85),
        "head_color": _hsv(hue, 0.75, 0.7),
        "body_half_h": rng.uniform(0.20, 0.27),   # fractions of H / W
        "body_half_w": rng.uniform(0.13, 0.19),
        "head_radius": rng.uniform(0.06, 0.09),
        "band_offset": rng.uniform(-0.35, 0.35),  # within the body, fraction of body_half_h
    }


def _paint_person(frame: np.ndarray, style: dict, cy: float, cx: float) -> np.ndarray:
    """Draw the figure onto (3, H, W); returns the painted pixel mask."""
    _, h, w = frame.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    bh = style["body_half_h"] * h
    bw = style["body_half_w"] * w
    body = ((ii - cy) / bh) ** 2 + ((jj - cx) / bw) ** 2 <= 1.0
    head_r = style["head_radius"] * h
    head_cy = cy - bh - head_r * 0.6
    head = (ii - head_cy) ** 2 + (jj - cx) ** 2 <= head_r**2
    band_cy = cy + style["band_offset"] * bh
    band = body & (np.abs(ii - band_cy) <= max(bh * 0.18, 1.0))
    for mask, color in ((body, style["body_color"]), (band, style["band_color"]),
                        (head, style["head_color"])):
        frame[:, mask] = color[:, None]
    return body | head


def _paint_occluder(
    frame: np.ndarray, style: dict, cy: float, cx: float,
    half_h: float, half_w: float, rng: np.random.Generator,
) -> None:
    _, h, w = frame.shape
    oh = half_h * rng.uniform(1.05, 1.4)
    ow = half_w * rng.uniform(1.05, 1.4)
    ocy = cy + rng.uniform(-0.15, 0.15) * half_h
    ocx = cx + rng.uniform(-0.15, 0.15) * half_w
    i0, i1 = int(max(ocy - oh, 0)), int(min(ocy + oh, h - 1)) + 1
    j0, j1 = int(max(ocx - ow, 0)), int(min(ocx + ow, w - 1)) + 1
    color = style["color"]
    frame[:, i0:i1, j0:j1] = color[:, None, None]
    if style["striped"]:
        frame[:, i0:i1:3, j0:j1] = color[:, None, None] * 0.5


def render_tracklet(
    spec: SynthSpec,
    person_id: int,
    camera_id: int,
    index: int,
    occluded_frames: set[int] | None = None,
) -> Tracklet:
    """Render one tracklet deterministically from (seed, id, camera, index).

    ``occluded_frames`` forces the occlusion pattern (used by evaluation
    harnesses); None draws it per frame at the configured probability.
    """
    if not 0 <= person_id < spec.num_ids:
        raise ConfigError(f"person_id {person_id} outside [0, {spec.num_ids})")
    if not 0 <= camera_id < spec.num_cameras:
        raise ConfigError(f"camera_id {camera_id} outside [0, {spec.num_cameras})")
    rng = _style_rng(spec.seed, 3001, person_id, camera_id, index)
    h, w, t = spec.height, spec.width, spec.frames_per_tracklet
    background = camera_background(spec, camera_id)
    occ_style = camera_occluder_style(spec, camera_id)
    style = person_style(spec, person_id)

    bh = style["body_half_h"] * h
    bw = style["body_half_w"] * w
    margin_x = bw + 1
    margin_y = bh + style["head_radius"] * h * 2 + 1
    x0 = rng.uniform(margin_x, w - margin_x)
    drift = rng.uniform(-1.0, 1.0) * (0.35 * w) / max(t - 1, 1)
    y0 = rng.uniform(margin_y, max(h - bh - 1, margin_y + 1))

    frames = np.empty((t, 3, h, w))
    occluded = np.zeros(t, dtype=bool)
    rgb_sum = np.zeros(3)
    for f in range(t):
        cx = x0 + drift * f + rng.uniform(-1.0, 1.0) * spec.jitter * w
        cy = y0 + rng.uniform(-1.0, 1.0) * spec.jitter * h * 0.5
        cx = float(np.clip(cx, margin_x, w - margin_x))
        cy = float(np.clip(cy, margin_y, h - bh - 1))
        frame = background.copy()
        mask = _paint_person(frame, style, cy, cx)
        rgb_sum += frame[:, mask].mean(axis=1)
        occlude = (
            f in occluded_frames
            if occluded_frames is not None
            else bool(rng.random() < spec.occlusion_prob)
        )
        if occlude:
            _paint_occluder(frame, occ_style, cy, cx, bh + style["head_radius"] * h,
                            bw, rng)
            occluded[f] = True
        if spec.background_noise > 0:
            frame = frame + rng.normal(0.0, spec.background_noise, size=frame.shape)
        frames[f] = np.clip(frame, 0.0, 1.0)
    return Tracklet(
        frames=frames.astype(np.float32),
        person_id=person_id,
        camera_id=camera_id,
        index=index,
        occluded=occluded,
        target_rgb=rgb_sum / t,
    )


def generate_corpus(spec: SynthSpec) -> Corpus:
    """Render all tracklets and split them train / query / gallery.

    Identity sets are disjoint between train and test; query and gallery share
    the test identities (tracklet sets disjoint) so every query has a
    cross-camera gallery match.
    """
    n_train = spec.num_train_ids
    train: list[Tracklet] = []
    query: list[Tracklet] = []
    gallery: list[Tracklet] = []
    per_cam = spec.tracklets_per_id_per_camera
    for pid in range(spec.num_ids):
        for cam in range(spec.num_cameras):
            for idx in range(per_cam):
                tracklet = render_tracklet(spec, pid, cam, idx)
                if pid < n_train:
                    tracklet.split = "train"
                    train.append(tracklet)
                elif per_cam >= 2:
                    tracklet.split = "query" if idx == 0 else "gallery"
                    (query if idx == 0 else gallery).append(tracklet)
                else:
                    tracklet.split = "query" if cam == 0 else "gallery"
                    (query if cam == 0 else gallery).append(tracklet)
    corpus = Corpus(spec=spec, train=train, query=query, gallery=gallery)
    _validate_protocol(corpus)
    return corpus


def _validate_protocol(corpus: Corpus) -> None:
    train_ids = {t.person_id for t in corpus.train}
    test_ids = {t.person_id for t in corpus.query} | {t.person_id for t in corpus.gallery}
    if train_ids & test_ids:
        raise ConfigError(f"train/test identity overlap: {sorted(train_ids & test_ids)}")
    gallery_keys = {(t.person_id, t.camera_id) for t in corpus.gallery}
    for q in corpus.query:
        if not any(pid == q.person_id and cam != q.camera_id for pid, cam in gallery_keys):
            raise ConfigError(
                f"query (id {q.person_id}, cam {q.camera_id}) has no cross-camera "
                f"gallery match"
            )


# -- disk layout -------------------------------------------------------


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    """corpus/{split}/id_XXXX/cam_YY/tracklet_ZZ.dstn plus manifest.json."""
    root = Path(root)
    records = []
    for split in ("train", "query", "gallery"):
        for t in corpus.split(split):
            rel = (
                Path(split)
                / f"id_{t.person_id:04d}"
                / f"cam_{t.camera_id:02d}"
                / f"tracklet_{t.index:02d}.dstn"
            )
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            write_dstn(path, t.frames)
            records.append(
                {
                    "split": split,
                    "person_id": t.person_id,
                    "camera_id": t.camera_id,
                    "index": t.index,
                    "frames": len(t),
                    "occluded": t.occluded.astype(int).tolist(),
                    "path": str(rel),
                }
            )
    manifest = {
        "format": "synthetic-reid-corpus",
        "spec": asdict(corpus.spec),
        "tracklets": records,
    }
    with open(root / MANIFEST_NAME, "w") as fp:
        json.dump(manifest, fp, sort_keys=True, indent=1)
    return root


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"no {MANIFEST_NAME} under {root}")
    with open(manifest_path) as fp:
        manifest = json.load(fp)
    if manifest.get("format") != "synthetic-reid-corpus":
        raise ConfigError(f"{manifest_path} is not a corpus manifest")
    spec = SynthSpec(**manifest["spec"])
    splits: dict[str, list[Tracklet]] = {"train": [], "query": [], "gallery": []}
    for rec in manifest["tracklets"]:
        frames = read_dstn(root / rec["path"]).astype(np.float32)
        splits[rec["split"]].append(
            Tracklet(
                frames=frames,
                person_id=rec["person_id"],
                camera_id=rec["camera_id"],
                index=rec["index"],
                split=rec["split"],
                occluded=np.asarray(rec["occluded"], dtype=bool),
            )
        )
    return Corpus(spec=spec, **splits)


# -- clip sampling and augmentation ------------------------------------


def rrs_sample(n_frames: int, t: int, rng: np.random.Generator) -> np.ndarray:
    """Restricted random sampling: one frame from each of t equal chunks.

    Frame order is preserved.  Tracklets shorter than t are padded by
    repeating the last frame.
    """
    if n_frames < 1 or t < 1:
        raise ValueError(f"need n_frames >= 1 and t >= 1, got {n_frames}, {t}")
    if n_frames < t:
        log.debug("rrs_sample: padding %d frames to %d by repeating the last", n_frames, t)
        return np.concatenate(
            [np.arange(n_frames), np.full(t - n_frames, n_frames - 1)]
        )
    bounds = [(i * n_frames) // t for i in range(t + 1)]
    return np.array(
        [rng.integers(bounds[i], bounds[i + 1]) for i in range(t)]
    )


def erase_rect(
    rng: np.random.Generator, h: int, w: int, attempts: int = 100
) -> tuple[int, int, int, int] | None:
    """Sample an erasing rectangle: area 2-33% of the frame, aspect 0.3-3.3."""
    area = h * w
    for _ in range(attempts):
        target = rng.uniform(0.02, 0.33) * area
        aspect = rng.uniform(0.3, 3.3)
        rh = int(round(np.sqrt(target * aspect)))
        rw = int(round(np.sqrt(target / aspect)))
        if rh < 1 or rw < 1 or rh > h or rw > w:
            continue
        if not 0.02 * area <= rh * rw <= 0.33 * area:
            continue
        i = int(rng.integers(0, h - rh + 1))
        j = int(rng.integers(0, w - rw + 1))
        return i, j, rh, rw
    return None


def augment_clip(frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Clip-consistent horizontal flip and random erasing (p=0.5 each).

    The erased rectangle and its noise fill are shared by every frame of the
    clip so temporal structure stays intact.
    """
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"augment_clip expects (t, 3, h, w), got {frames.shape}")
    out = frames.copy()
    if rng.random() < 0.5:
        out = out[:, :, :, ::-1].copy()
    if rng.random() < 0.5:
        rect = erase_rect(rng, out.shape[2], out.shape[3])
        if rect is not None:
            i, j, rh, rw = rect
            noise = rng.random((3, rh, rw))
            out[:, :, i : i + rh, j : j + rw] = noise[None].astype(out.dtype)
    return out


# -- batch sampling ----------------------------------------------------


def pk_batches(
    tracklets: list[Tracklet],
    p: int,
    k: int,
    rng: np.random.Generator,
    batches: int | None = None,
):
    """Yield identity-balanced batches: p distinct identities, k clips each.

    Identities with fewer than k tracklets are resampled with replacement.
    The default number of batches per epoch covers the tracklet count at one
    clip apiece, with a floor of one pass over the identity list.
    """
    by_id: dict[int, list[int]] = {}
    for i, t in enumerate(tracklets):
        by_id.setdefault(t.person_id, []).append(i)
    ids = sorted(by_id)
    if len(ids) < p:
        raise ConfigError(
            f"sampler needs at least p={p} identities, corpus has {len(ids)}"
        )
    if batches is None:
        batches = max(len(ids) // p, int(round(len(tracklets) / (p * k))), 1)
    short = [i for i in ids if len(by_id[i]) < k]
    if short:
        log.debug("pk_batches: %d identities have fewer than k=%d tracklets", len(short), k)
    id_arr = np.array(ids)
    for _ in range(batches):
        chosen = rng.choice(len(ids), size=p, replace=False)
        batch = []
        for pid in id_arr[np.sort(chosen)]:
            pool = by_id[pid]
            if len(pool) >= k:
                picks = rng.choice(len(pool), size=k, replace=False)
            else:
                picks = rng.choice(len(pool), size=k, replace=True)
            batch.extend(tracklets[pool[j]] for j in picks)
        yield batch
