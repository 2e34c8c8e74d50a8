"""
fgvis — Adversarial-Evidence Validation

Two protocols, both running the generation game with no sparsity term against
a class that has no evidence in the input:

  - image-seeded: confidently classified images, target = least-likely class
  - black-image:  one all-black input, target = every class except the black
                  image's prediction and the starting condition's prediction

A trial succeeds when the target score exceeds the threshold at any iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from shared.datasets import Dataset, black_image
from shared.middleware import audit_log, run_parallel
from shared.models import (
    DefenseConfig,
    DefenseTrial,
    EmptyEligibleSetError,
    FgvisError,
    GameConfig,
    GameKind,
)
from shared.tensor import Tensor

from .games import StepInfo, apply_mask, optimize_mask
from .network import Network, forward, predict


@dataclass(frozen=True)
class DefenseReport:
    defended: bool
    trials: list[DefenseTrial]

    @property
    def ratio(self) -> float:
        if not self.trials:
            return 0.0
        return sum(t.success for t in self.trials) / len(self.trials)


def select_adversarial_class(scores: Tensor, zero_image_class: int) -> int:
    """Least-likely class; the second least-likely if it is the zero image's class."""
    if len(scores) < 2:
        raise FgvisError("adversarial class selection needs at least 2 classes")
    order = np.argsort(scores, kind="stable")  # ties: lowest index first
    if int(order[0]) == zero_image_class:
        return int(order[1])
    return int(order[0])


def batch_scores(net: Network, images: Tensor, batch_size: int = 256) -> Tensor:
    return np.concatenate(
        [forward(net, images[i : i + batch_size]).scores for i in range(0, len(images), batch_size)]
    )


def eligible_indices(net: Network, dataset: Dataset, confidence: float) -> list[int]:
    """Images classified correctly with p(c_true) >= confidence, in dataset order."""
    scores = batch_scores(net, dataset.images)
    top = scores.argmax(axis=1)
    p_true = scores[np.arange(len(scores)), dataset.labels]
    keep = (top == dataset.labels) & (p_true >= confidence)
    return [int(i) for i in np.flatnonzero(keep)]


def run_trial(
    net: Network,
    x: Tensor,
    image_id: str,
    c_A: int,
    defended: bool,
    config: DefenseConfig,
) -> DefenseTrial:
    cfg = GameConfig(
        game=GameKind.GENERATION,
        target_class=c_A,
        lambda_=0.0,
        learning_rate=config.learning_rate,
        iterations=config.iterations,
        seed=config.seed,
        defended=defended,
    )
    hit: list[tuple[float, int]] = []

    def watch(step: StepInfo) -> bool:
        score = float(step.scores[c_A])
        if score > config.threshold:
            # step.scores belong to the mask before this step's update
            hit.append((score, step.iteration - 1))
            return True
        return False

    x = np.asarray(x, dtype=net.dtype)
    state = optimize_mask(net, x, cfg, step_hook=watch)
    if hit:
        final_score, used = hit[0]
    else:
        e = apply_mask(x, state.mask, np.zeros_like(x))
        final_score, used = float(forward(net, e).scores[c_A]), state.iteration
    trial = DefenseTrial(
        image_id=image_id,
        c_A=c_A,
        defended=defended,
        success=final_score > config.threshold,
        final_score=final_score,
        iterations_used=used,
    )
    audit_log("defense.trial", **trial.model_dump())
    return trial


def run_defense_validation(
    net: Network,
    dataset: Dataset,
    defended: bool,
    *,
    n: int = 100,
    config: DefenseConfig = DefenseConfig(),
    jobs: int = 1,
) -> DefenseReport:
    """Image-seeded protocol over the first n high-confidence images."""
    eligible = eligible_indices(net, dataset, config.confidence)[: max(n, 0)]
    if not eligible:
        raise EmptyEligibleSetError(
            f"empty eligible set: {len(dataset)} images, requested n={n}, "
            f"confidence >= {config.confidence}"
        )
    zero_class, _ = predict(net, np.zeros(net.input_shape, dtype=net.dtype))

    def trial(i: int) -> DefenseTrial:
        x = dataset.images[i]
        c_A = select_adversarial_class(forward(net, x).scores, zero_class)
        return run_trial(net, x, dataset.ids[i], c_A, defended, config)

    return DefenseReport(defended=defended, trials=run_parallel(trial, eligible, jobs))


def blackimage_classes(net: Network) -> tuple[Tensor, Sequence[int]]:
    """The black input and the classes it is tested against."""
    black = black_image(net.input_shape, net.normalization)
    black_class, _ = predict(net, black)
    start_class, _ = predict(net, np.zeros(net.input_shape, dtype=net.dtype))
    skip = {black_class, start_class}
    return black, [c for c in range(net.num_classes) if c not in skip]


def run_blackimage_validation(
    net: Network,
    defended: bool,
    *,
    config: DefenseConfig = DefenseConfig(),
    jobs: int = 1,
) -> DefenseReport:
    black, classes = blackimage_classes(net)
    trials = run_parallel(
        lambda c: run_trial(net, black, "black", c, defended, config), classes, jobs
    )
    return DefenseReport(defended=defended, trials=trials)
