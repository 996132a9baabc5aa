"""The standard finite-difference suites: every loss term, then the total.

Each suite drives a small fixed model (width 16, two-frame clips, 8x8 input,
four clips per batch) with a pinned batch and checks analytic gradients of one
loss term against central differences over every parameter.  Coordinates are
subsampled deterministically to keep the whole set under the runtime budget.
All suites run in double precision.
"""

from __future__ import annotations

import numpy as np

from .backbone import camera_ce_loss, disentangling_loss
from .engine import TrainConfig, batch_objective, switch_and_aggregate_fixed
from .fwg import frame_weight_loss
from .gradcheck import GradCheckReport, finite_diff_check
from .model import DisentangledReidNet, ModelConfig
from .objective import ALL_COMPONENTS, intra_class_loss, triplet_loss
from .tlm import lr_loss

LOSS_SUITES = ("dis", "lr", "w", "ic", "cam", "tri", "sao_ce", "total")

TINY_MODEL = ModelConfig(
    channels=16,
    strides=(2, 1, 1, 1),
    num_ids=4,
    num_cameras=2,
    input_hw=(8, 8),
)


def tiny_setup(seed: int = 0):
    """Fixed model + batch: 4 clips (2 identities x 2), 2 cameras, pinned permutation."""
    model = DisentangledReidNet(TINY_MODEL, np.random.default_rng(seed))
    model.set_stat_updates(False)  # stat EMA is a side effect; freeze it for checks
    rng = np.random.default_rng(seed + 1)
    frames = rng.random((4, 2, 3, 8, 8))
    ids = np.array([0, 0, 1, 1])
    cams = np.array([0, 1, 0, 1])
    permutation = np.array([1, 0, 3, 2])
    return model, frames, ids, cams, permutation


def _forward(model, frames, ids, **needs):
    return model.forward_clips(frames, labels=ids, enabled=ALL_COMPONENTS, **needs)


def _suite_fn(name: str, model, frames, ids, cams, permutation):
    if name == "dis":
        def f():
            feats = _forward(model, frames, ids, need_camera=True)
            return disentangling_loss(feats.f_id, feats.f_cam)[0]
    elif name == "lr":
        def f():
            feats = _forward(model, frames, ids, need_camera=False, need_sides=True)
            return lr_loss(feats.side_left, feats.side_right, ids, model.id_head)
    elif name == "w":
        # pseudo-labels are constants by construction; pin them at the base
        # point so the finite difference sees the same function backward saw
        base = _forward(model, frames, ids, need_camera=False, need_targets=True)
        pinned = base.weight_targets

        def f():
            feats = _forward(
                model, frames, ids, need_camera=False, need_targets=True,
                weight_targets=pinned,
            )
            return frame_weight_loss(feats.weight_targets, feats.weights)
    elif name == "ic":
        def f():
            return intra_class_loss(_forward(model, frames, ids, need_camera=False).f_id, ids)
    elif name == "cam":
        def f():
            feats = _forward(model, frames, ids, need_camera=True)
            return camera_ce_loss(feats.f_cam, cams, model.cam_head)
    elif name == "tri":
        def f():
            return triplet_loss(_forward(model, frames, ids, need_camera=False).f_id, ids)
    elif name == "sao_ce":
        def f():
            feats = _forward(model, frames, ids, need_camera=True)
            switched = switch_and_aggregate_fixed(
                feats.f_id, feats.f_cam, ids, permutation
            )
            from .sao import switched_ce_loss

            return switched_ce_loss(switched, model.id_head)
    elif name == "total":
        config = TrainConfig(epochs=0, p_identities=2, k_clips=2, frames_per_clip=2)
        base = _forward(model, frames, ids, need_camera=False, need_targets=True)
        pinned = base.weight_targets

        def f():
            total, _ = batch_objective(
                model, frames, ids, cams, config, permutation=permutation,
                weight_targets=pinned,
            )
            return total
    else:
        raise ValueError(f"unknown gradient suite {name!r}; valid: {list(LOSS_SUITES)}")
    return f


def run_suite(
    name: str,
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_coords_per_param: int | None = 32,
) -> GradCheckReport:
    model, frames, ids, cams, permutation = tiny_setup(seed)
    f = _suite_fn(name, model, frames, ids, cams, permutation)
    report = finite_diff_check(
        f,
        model.parameters(),
        eps=eps,
        tol=tol,
        max_coords_per_param=max_coords_per_param,
        rng=np.random.default_rng(1234 + LOSS_SUITES.index(name)),
    )
    report.name = name
    return report


def run_standard_checks(
    seed: int = 0,
    tol: float = 1e-4,
    max_coords_per_param: int | None = 32,
) -> list[GradCheckReport]:
    """All eight suites in order; the composed total runs last."""
    return [
        run_suite(name, seed=seed, tol=tol, max_coords_per_param=max_coords_per_param)
        for name in LOSS_SUITES
    ]
