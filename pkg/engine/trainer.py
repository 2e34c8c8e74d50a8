"""
fgvis — Fixture Trainer

Minibatch SGD with momentum on cross-entropy, constant learning rate, no
augmentation. Single-threaded and seeded so the same config reproduces the
same weights bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from shared.datasets import Dataset
from shared.middleware import audit_log
from shared.models import ArchSpec, EpochRecord, FgvisError, TrainConfig
from shared.tensor import ORACLE_DTYPE, Rng, Tensor

from .defense import batch_scores
from .network import Network, backward, build_network, forward, relative_error


@dataclass(frozen=True, eq=False)
class TrainResult:
    network: Network
    accuracy: float
    below_target: bool
    history: list[EpochRecord] = field(default_factory=list)


def evaluate(net: Network, dataset: Dataset) -> float:
    """Fraction of argmax-correct predictions."""
    if len(dataset) == 0:
        raise FgvisError("cannot evaluate on an empty split")
    predicted = batch_scores(net, dataset.images).argmax(axis=1)
    return float(np.mean(predicted == dataset.labels))


def cross_entropy_batch(net: Network, images: Tensor, labels: Tensor) -> tuple[float, list[Tensor]]:
    """Mean cross-entropy of a batch and its parameter gradients."""
    tape = forward(net, images)
    scores = tape.scores
    n = len(labels)
    rows = np.arange(n)
    # log-softmax from the logits keeps the loss finite for confident mistakes
    logits = tape.logits.astype(ORACLE_DTYPE)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[rows, labels].mean())
    g_logits = scores.copy()
    g_logits[rows, labels] -= 1
    g_logits /= n
    grads = backward(net, tape, g_logits, from_logits=True, with_params=True).params
    return loss, grads


def train(
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig = TrainConfig(),
    arch: Optional[ArchSpec] = None,
) -> TrainResult:
    """Train the fixture template; accuracy below cfg.target_accuracy is flagged, not raised."""
    arch = arch or ArchSpec(input_shape=train_set.image_shape)
    if tuple(arch.input_shape) != train_set.image_shape:
        raise FgvisError(f"architecture input {arch.input_shape} != data {train_set.image_shape}")
    train_set.check_labels(arch.num_classes)
    rng = Rng(cfg.seed)
    net = build_network(arch, rng.spawn(0), train_set.normalization)
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    order_rng = rng.spawn(1)

    history: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = cross_entropy_batch(net, train_set.images[idx], train_set.labels[idx])
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
            losses.append(loss * len(idx))
        record = EpochRecord(
            epoch=epoch,
            loss=float(np.sum(losses) / len(order)),
            accuracy=evaluate(net, test_set),
        )
        history.append(record)
        audit_log("train.epoch", **record.model_dump())

    accuracy = evaluate(net, test_set)
    return TrainResult(
        network=net,
        accuracy=accuracy,
        below_target=accuracy < cfg.target_accuracy,
        history=history,
    )


def parameter_gradient_check(
    net: Network,
    images: Tensor,
    labels: Tensor,
    eps: float = 1e-4,
    *,
    n_coords: int = 20,
    rng: Optional[Rng] = None,
) -> float:
    """Max relative error of weight gradients against central differences (float64)."""
    net64 = net.astype(ORACLE_DTYPE)
    images = np.asarray(images, dtype=ORACLE_DTYPE)
    _, grads = cross_entropy_batch(net64, images, labels)
    rng = rng or Rng(0)
    worst = 0.0
    for p, g in zip(net64.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in rng.choice(flat.size, min(n_coords, flat.size)):
            saved = flat[k]
            flat[k] = saved + eps
            up, _ = cross_entropy_batch(net64, images, labels)
            flat[k] = saved - eps
            down, _ = cross_entropy_batch(net64, images, labels)
            flat[k] = saved
            worst = max(worst, relative_error(float(gflat[k]), (up - down) / (2 * eps)))
    return worst
