"""Tracklet feature extraction, ranking metrics, and linear probes.

A tracklet is scored by chunking it into consecutive fixed-length clips
(remainder right-aligned so no frame is dropped), averaging the clip identity
vectors, and ranking the gallery by cosine distance.  Candidates that share
both identity and camera with the query are filtered before scoring, so the
metrics measure cross-camera matching only.  The probes are small softmax
regressions trained on frozen features; they quantify how much identity or
camera information a representation carries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .engine import Adam
from .nn import cross_entropy
from .objective import ALL_COMPONENTS

log = logging.getLogger(__name__)


def clip_chunks(n_frames: int, t: int) -> list[np.ndarray]:
    """Frame index groups covering a tracklet with clips of exactly t frames.

    Full consecutive chunks first; a remainder becomes one final chunk of the
    last t frames (overlapping the previous chunk).  Tracklets shorter than t
    are padded by repeating the last frame.
    """
    if n_frames < 1 or t < 1:
        raise ValueError(f"need n_frames >= 1 and t >= 1, got {n_frames}, {t}")
    if n_frames < t:
        return [np.concatenate([np.arange(n_frames), np.full(t - n_frames, n_frames - 1)])]
    chunks = [np.arange(i * t, (i + 1) * t) for i in range(n_frames // t)]
    if n_frames % t:
        chunks.append(np.arange(n_frames - t, n_frames))
    return chunks


@dataclass
class FeatureIndex:
    f_id: np.ndarray                  # (N, c)
    person_ids: np.ndarray            # (N,)
    camera_ids: np.ndarray            # (N,)
    f_cam: np.ndarray | None = None   # (N, c) when camera features were requested


def extract_features(
    model,
    tracklets: list,
    frames_per_clip: int,
    enabled: frozenset[str] = ALL_COMPONENTS,
    need_camera: bool = False,
    batch_clips: int = 32,
) -> FeatureIndex:
    """Mean clip-level features per tracklet, batched across tracklets."""
    if not tracklets:
        raise ConfigError("no tracklets to extract features from")
    specs: list[tuple[int, np.ndarray]] = []
    for i, tr in enumerate(tracklets):
        for idx in clip_chunks(len(tr.frames), frames_per_clip):
            specs.append((i, idx))
    c = model.config.channels
    sums = np.zeros((len(tracklets), c))
    cam_sums = np.zeros((len(tracklets), c)) if need_camera else None
    counts = np.zeros(len(tracklets))
    dtype = T.default_dtype()
    for start in range(0, len(specs), batch_clips):
        part = specs[start : start + batch_clips]
        frames = np.stack(
            [tracklets[i].frames[idx] for i, idx in part]
        ).astype(dtype)
        out = model.extract(frames, enabled=enabled, need_camera=need_camera)
        for row, (i, _) in enumerate(part):
            sums[i] += out["f_id"][row]
            counts[i] += 1
            if cam_sums is not None:
                cam_sums[i] += out["f_cam"][row]
    f_id = sums / counts[:, None]
    return FeatureIndex(
        f_id=f_id,
        person_ids=np.array([t.person_id for t in tracklets]),
        camera_ids=np.array([t.camera_id for t in tracklets]),
        f_cam=cam_sums / counts[:, None] if cam_sums is not None else None,
    )


def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 1 - cosine similarity; zero vectors sit at distance 1 to everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise T.ShapeError(f"incompatible feature shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dead = int((na < 1e-12).sum() + (nb < 1e-12).sum())
    if dead:
        log.warning("cosine_distance_matrix: %d zero-norm feature vector(s)", dead)
    an = a / np.maximum(na, 1e-12)[:, None]
    bn = b / np.maximum(nb, 1e-12)[:, None]
    an[na < 1e-12] = 0.0
    bn[nb < 1e-12] = 0.0
    return 1.0 - an @ bn.T


@dataclass
class RetrievalResult:
    cmc: np.ndarray        # cmc[k] = P(correct match within rank k+1)
    mean_ap: float
    n_queries: int
    n_excluded: int        # queries with no valid cross-camera positive

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_dict(self) -> dict:
        """results.json shape: mAP, CMC at the standard ranks, query counts."""
        cmc = {str(k): self.rank(k) for k in (1, 5, 10, 20) if k <= len(self.cmc)}
        return {
            "mAP": self.mean_ap,
            "CMC": cmc,
            "num_queries": self.n_queries,
            "excluded_queries": self.n_excluded,
        }


def cmc_map(
    dist: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    topk: int = 20,
) -> RetrievalResult:
    """CMC curve and mean average precision under the cross-view protocol.

    For each query, gallery entries sharing both its identity and camera are
    removed; ties rank by gallery order (stable sort).  Queries left without
    any positive are excluded and counted.
    """
    dist = np.asarray(dist)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    n_q, n_g = dist.shape
    if query_ids.shape != (n_q,) or query_cams.shape != (n_q,):
        raise T.ShapeError("query label shapes do not match the distance matrix")
    if gallery_ids.shape != (n_g,) or gallery_cams.shape != (n_g,):
        raise T.ShapeError("gallery label shapes do not match the distance matrix")
    topk = min(topk, n_g)
    cmc = np.zeros(topk)
    aps: list[float] = []
    excluded = 0
    for i in range(n_q):
        keep = ~((gallery_ids == query_ids[i]) & (gallery_cams == query_cams[i]))
        order = np.argsort(dist[i], kind="stable")
        order = order[keep[order]]
        matches = gallery_ids[order] == query_ids[i]
        if not matches.any():
            excluded += 1
            continue
        first = int(np.argmax(matches))
        if first < topk:
            cmc[first:] += 1.0
        hit_ranks = np.nonzero(matches)[0]
        precision_at_hits = (np.arange(len(hit_ranks)) + 1.0) / (hit_ranks + 1.0)
        aps.append(float(precision_at_hits.mean()))
    scored = n_q - excluded
    if scored == 0:
        raise ConfigError("every query was excluded; no cross-camera positives exist")
    if excluded:
        log.info("cmc_map: excluded %d of %d queries without positives", excluded, n_q)
    return RetrievalResult(
        cmc=cmc / scored,
        mean_ap=float(np.mean(aps)),
        n_queries=n_q,
        n_excluded=excluded,
    )


def evaluate_retrieval(
    model,
    query: list,
    gallery: list,
    frames_per_clip: int,
    enabled: frozenset[str] = ALL_COMPONENTS,
    topk: int = 20,
) -> tuple[RetrievalResult, np.ndarray, FeatureIndex, FeatureIndex]:
    """End-to-end: features for both splits, distances, CMC/mAP."""
    q = extract_features(model, query, frames_per_clip, enabled=enabled)
    g = extract_features(model, gallery, frames_per_clip, enabled=enabled)
    dist = cosine_distance_matrix(q.f_id, g.f_id)
    result = cmc_map(
        dist, q.person_ids, q.camera_ids, g.person_ids, g.camera_ids, topk=topk
    )
    return result, dist, q, g


# -- linear probes -----------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    majority_baseline: float   # accuracy of always predicting the modal class
    n_train: int
    n_eval: int
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "majority_baseline": self.majority_baseline,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "num_classes": self.num_classes,
        }


def probe_accuracy(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    epochs: int = 100,
    lr: float = 0.05,
) -> ProbeResult:
    """Softmax-regression probe on frozen features.

    Features are standardized with training statistics; each class is split
    half/half into train and held-out sets after a seeded shuffle.  Returns
    held-out accuracy.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise T.ShapeError(
            f"probe expects (N, d) features and (N,) labels, got "
            f"{features.shape} and {labels.shape}"
        )
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("probe needs at least 2 classes")
    dense = np.searchsorted(classes, labels)
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    eval_idx: list[int] = []
    for c in range(len(classes)):
        members = np.nonzero(dense == c)[0]
        members = members[rng.permutation(len(members))]
        half = (len(members) + 1) // 2
        train_idx.extend(members[:half])
        eval_idx.extend(members[half:])
    if not eval_idx:
        raise ConfigError("every class has a single sample; nothing to hold out")
    tr = np.sort(np.array(train_idx))
    ev = np.sort(np.array(eval_idx))

    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0)
    sd[sd < 1e-8] = 1.0
    x_tr = np.hstack([(features[tr] - mu) / sd, np.ones((len(tr), 1))])
    x_ev = np.hstack([(features[ev] - mu) / sd, np.ones((len(ev), 1))])
    y_tr = dense[tr]
    y_ev = dense[ev]

    w = T.Tensor(np.zeros((len(classes), x_tr.shape[1])), requires_grad=True)
    opt = Adam({"w": w})
    x_t = T.Tensor(x_tr)
    for _ in range(epochs):
        w.zero_grad()
        loss = cross_entropy(T.matmul(x_t, T.transpose(w, (1, 0))), y_tr)
        loss.backward()
        opt.step(lr)
    pred = np.argmax(x_ev @ w.data.T, axis=1)
    counts = np.bincount(y_ev, minlength=len(classes))
    return ProbeResult(
        accuracy=float((pred == y_ev).mean()),
        majority_baseline=float(counts.max() / counts.sum()),
        n_train=len(tr),
        n_eval=len(ev),
        num_classes=len(classes),
    )
