"""Toy-scale experiment presets shared by the acceptance suite and scripts/.

The toy corpus is 64x64 with four classes; training runs 200 steps of
batch 16 on CPU. The key-encoder momentum is 0.99 instead of the
full-scale 0.999: over 200 steps a 0.999 key encoder barely moves away from
its initialization, so the queue keys stay stale and the loss hardly falls.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import TOY_QUEUE_SIZE
from .corpus import gen_toy_corpus, load_backgrounds, load_foregrounds
from .synth import SynthConfig, synthesize_dataset
from .train import (
    DatasetPairs,
    SynthPairs,
    TrainConfig,
    linear_probe,
    moving_average,
    new_state,
    pretrain,
    steps_to_threshold,
)

TOY_CLASSES = 4
TOY_SIZE = 64
TOY_STEPS = 200
TOY_BATCH = 16
WINDOW = 20
PROGRESS_FACTOR = 0.8
PROBE_PAIRS = 300


def toy_corpus(root, seed: int = 7):
    """Generate the toy corpus once under ``root`` and load it."""
    root = Path(root)
    if not (root / "foregrounds" / "instances.json").exists():
        return gen_toy_corpus(root, C=TOY_CLASSES, n_fore=10, n_back=100, seed=seed, size=TOY_SIZE)
    return load_foregrounds(root / "foregrounds"), load_backgrounds(root / "backgrounds")


def toy_train_config(seed: int, queue_init: str = "model", **overrides) -> TrainConfig:
    kw = dict(
        tau=0.2,
        m=0.99,
        lr=0.03,
        batch=TOY_BATCH,
        queue_size=TOY_QUEUE_SIZE,
        queue_init=queue_init,
        max_steps=TOY_STEPS,
        seed=seed,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def toy_source(fores, backs, seed: int) -> SynthPairs:
    return SynthPairs(fores, backs, SynthConfig(target_width=TOY_SIZE, seed=seed))


@dataclass
class ProgressRun:
    seed: int
    queue_init: str
    losses: list[float]
    initial: float
    final: float
    steps_to_threshold: int | None

    @property
    def ratio(self) -> float:
        return self.final / self.initial


def progress_run(fores, backs, seed: int, queue_init: str = "model", out=None) -> ProgressRun:
    """Train one toy run and summarize its loss curve by 20-step means."""
    res = pretrain(toy_source(fores, backs, seed), toy_train_config(seed, queue_init), out=out)
    losses = [m.loss for m in res.metrics]
    ma = moving_average(losses, WINDOW)
    return ProgressRun(
        seed=seed,
        queue_init=queue_init,
        losses=losses,
        initial=float(ma[0]),
        final=float(ma[-1]),
        steps_to_threshold=steps_to_threshold(losses, PROGRESS_FACTOR, WINDOW),
    )


def first_step_below(losses, threshold: float, window: int = WINDOW) -> int | None:
    """First step whose trailing mean is <= an externally given threshold."""
    hit = np.flatnonzero(moving_average(losses, window) <= threshold)
    return int(hit[0]) + window if hit.size else None


def probe_dataset(fores, backs, root, seed: int = 1000) -> DatasetPairs:
    root = Path(root)
    if not (root / "pairs.jsonl").exists():
        synthesize_dataset(fores, backs, SynthConfig(target_width=TOY_SIZE, seed=seed), PROBE_PAIRS, root)
    return DatasetPairs(root)


@dataclass
class ProbeGap:
    seed: int
    pretrained: float
    random_init: float

    @property
    def gap(self) -> float:
        return self.pretrained - self.random_init


def probe_gap(fores, backs, dataset: DatasetPairs, seed: int, out) -> ProbeGap:
    """Probe accuracy of a pre-trained encoder against its own untrained initialization."""
    cfg = toy_train_config(seed)
    res = pretrain(toy_source(fores, backs, seed), cfg, out=out)
    start = new_state(cfg, fores.registry.C).query
    return ProbeGap(
        seed=seed,
        pretrained=linear_probe(res.checkpoints[-1], dataset, seed=seed),
        random_init=linear_probe(start, dataset, seed=seed),
    )
