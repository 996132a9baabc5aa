"""Shared fixtures and the acceptance verdict summary.

Each acceptance test records exactly one PASS/FAIL line; the hook below
prints them after the run so the verdict survives pytest output capture.
The reference training run (32 identities x 4 cameras, full component
stack) is session-scoped because two acceptance gates read from it.
"""

from __future__ import annotations

import time
from types import SimpleNamespace

import numpy as np
import pytest

from disreid.engine import TrainConfig, Trainer
from disreid.model import DisentangledReidNet, ModelConfig
from disreid.synth import SynthSpec, generate_corpus

ACCEPTANCE_ORDER = (
    "gradient-checks",
    "metric-oracles",
    "structural-invariants",
    "disentanglement",
    "component-ordering",
    "occlusion-weighting",
    "parameter-census",
    "determinism",
)
_acceptance_lines: dict[str, str] = {}


def record_acceptance(name: str, passed: bool, detail: str) -> None:
    assert name in ACCEPTANCE_ORDER, name
    _acceptance_lines[name] = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("=", "acceptance summary")
    for name in ACCEPTANCE_ORDER:
        if name in _acceptance_lines:
            terminalreporter.write_line(_acceptance_lines[name])


REFERENCE_SPEC = SynthSpec(num_ids=32, num_cameras=4, seed=11)
REFERENCE_FRAMES = 4
REFERENCE_TRAIN = TrainConfig(
    epochs=120,
    batches_per_epoch=8,
    base_lr=1e-3,
    lr_step_epochs=1000,
    frames_per_clip=REFERENCE_FRAMES,
    augment=False,
    seed=0,
)


@pytest.fixture(scope="session")
def reference_run():
    """Train the full model once on the reference corpus; time the run."""
    corpus = generate_corpus(REFERENCE_SPEC)
    train_ids = sorted({t.person_id for t in corpus.train})
    config = ModelConfig(
        channels=64,
        num_ids=len(train_ids),
        num_cameras=REFERENCE_SPEC.num_cameras,
        input_hw=(REFERENCE_SPEC.height, REFERENCE_SPEC.width),
    )
    model = DisentangledReidNet(config, np.random.default_rng(0))
    trainer = Trainer(model, corpus.train, REFERENCE_TRAIN)
    start = time.perf_counter()
    trainer.run()
    seconds = time.perf_counter() - start
    return SimpleNamespace(
        model=model,
        corpus=corpus,
        spec=REFERENCE_SPEC,
        train_ids=train_ids,
        seconds=seconds,
    )
