"""
fgvis — Evaluation Metrics

  - deletion metric: remove pixels in importance order, track the original top
    class's score, integrate with the trapezoidal rule (lower = more faithful)
  - importance sources: deletion-game mean mask, random permutation, input gradient
  - entropy of reference images
  - colour-swap bias (BGR -> RBG / GRB)
  - mask binarization at a fraction of the maximum
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import entr

from shared.datasets import Dataset, raw_units_to_model
from shared.middleware import audit_log
from shared.models import (
    DELETION_METRIC_LINE_SEARCH,
    ColorBiasRow,
    ColorPermutation,
    EntropyRow,
    FgvisError,
    GameConfig,
    GameKind,
    GameKindError,
    ShapeError,
)
from shared.tensor import ORACLE_DTYPE, Rng, Tensor, gaussian_blur

from .games import ExplanationResult, line_search_lambda
from .network import Network, backward_to_input, forward

# ---------------------------------------------------------------------------
# Deletion metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeletionCurve:
    fractions: NDArray[np.float64]
    probs: NDArray[np.float64]
    auc: float
    target_class: int


def importance_map(result: ExplanationResult) -> Tensor:
    """Channel mean of (1 - m*) for a deletion-game result, [H, W]."""
    if result.game is not GameKind.DELETION:
        raise GameKindError(f"importance maps come from the deletion game, got {result.game.value}")
    return (1 - result.mask).mean(axis=0)


def deletion_schedule() -> NDArray[np.float64]:
    """0, then 100 steps of 0.25 %, then 75 steps of 1 %: 176 fractions ending at 1."""
    fine = np.arange(0, 101, dtype=np.float64) / 400.0
    coarse = np.arange(26, 101, dtype=np.float64) / 100.0
    return np.concatenate([fine, coarse])


def removal_order(imp: Tensor) -> NDArray[np.int64]:
    """Flat pixel indices by descending importance, ties in row-major order."""
    return np.argsort(-np.asarray(imp, dtype=ORACLE_DTYPE).ravel(), kind="stable")


def removal_masks(imp: Tensor, fractions: Sequence[float]) -> Iterator[NDArray[np.bool_]]:
    """Boolean [H, W] masks of the removed pixels at each fraction."""
    order = removal_order(imp)
    n = order.size
    for f in fractions:
        removed = np.zeros(n, dtype=bool)
        removed[order[: math.floor(f * n + 0.5)]] = True
        yield removed.reshape(imp.shape)


def trapezoid_auc(fractions: Sequence[float], probs: Sequence[float]) -> float:
    y = np.asarray(probs, dtype=ORACLE_DTYPE)
    return float(np.trapezoid(y, np.asarray(fractions, dtype=ORACLE_DTYPE)))


def deletion_curve(
    net: Network,
    x: Tensor,
    imp: Tensor,
    fractions: Optional[Sequence[float]] = None,
) -> DeletionCurve:
    """Zero the most important pixels (all channels) at each fraction of the schedule."""
    if tuple(imp.shape) != tuple(x.shape[1:]):
        raise ShapeError(f"importance map {imp.shape} does not match image {x.shape[1:]}")
    fractions = deletion_schedule() if fractions is None else np.asarray(fractions, ORACLE_DTYPE)
    x = np.asarray(x, dtype=net.dtype)
    target = forward(net, x).predicted
    probs = []
    for removed in removal_masks(imp, fractions):
        xr = x.copy()
        xr[:, removed] = 0
        probs.append(float(forward(net, xr).scores[target]))
    probs = np.asarray(probs, dtype=ORACLE_DTYPE)
    return DeletionCurve(fractions, probs, trapezoid_auc(fractions, probs), target)


# ---------------------------------------------------------------------------
# Importance sources
# ---------------------------------------------------------------------------

def fgvis_importance(net: Network, x: Tensor, seed: int = 0) -> Tensor:
    """Deletion-game mean mask from the deletion-metric line search."""
    result = line_search_lambda(
        net, x, GameConfig(game=GameKind.DELETION, seed=seed), DELETION_METRIC_LINE_SEARCH
    )
    return importance_map(result)


def random_importance(shape: tuple[int, int], rng: Rng) -> Tensor:
    return rng.permutation(shape[0] * shape[1]).reshape(shape).astype(ORACLE_DTYPE)


def input_gradient_importance(net: Network, x: Tensor) -> Tensor:
    """|d scores[c_ml] / dx|, max over channels."""
    tape = forward(net, x)
    onehot = np.zeros(net.num_classes, dtype=net.dtype)
    onehot[tape.predicted] = 1
    return np.abs(backward_to_input(net, tape, onehot)).max(axis=0)


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------

def entropy(scores: Tensor) -> float:
    """-sum p ln p with 0 ln 0 = 0."""
    return float(entr(np.asarray(scores, dtype=ORACLE_DTYPE)).sum())


def _row(name: str, values: Sequence[float]) -> EntropyRow:
    arr = np.asarray(values, dtype=ORACLE_DTYPE)
    return EntropyRow(reference=name, mean=float(arr.mean()), std=float(arr.std()))


def reference_entropy_report(
    net: Network,
    dataset: Dataset,
    n_trials: int,
    rng: Rng,
    noise_sigmas: Sequence[float] = (8.0, 32.0),
    blur_sigmas: Sequence[float] = (5.0, 10.0),
) -> list[EntropyRow]:
    """Prediction entropy of candidate reference images (mean +- std over trials)."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    shape = net.input_shape

    def h(img: Tensor) -> float:
        return entropy(forward(net, img.astype(net.dtype)).scores)

    picks = rng.choice(len(dataset), min(n_trials, len(dataset)))
    rows = [_row("zero image", [h(np.zeros(shape, dtype=net.dtype))])]
    for sigma in noise_sigmas:
        scale = raw_units_to_model(sigma, net.normalization)[:, None, None]
        rows.append(_row(
            f"gaussian noise (sigma_n={sigma:g})",
            [h(rng.normal(shape, 1.0, dtype=ORACLE_DTYPE) * scale) for _ in range(n_trials)],
        ))
    for sigma in blur_sigmas:
        rows.append(_row(
            f"blurred image (sigma_b={sigma:g})",
            [h(gaussian_blur(dataset.images[i], sigma)) for i in picks],
        ))
    rows.append(_row("dataset image", [h(dataset.images[i]) for i in picks]))
    rows.append(EntropyRow(
        reference=f"maximum ({net.num_classes} classes)",
        mean=math.log(net.num_classes),
        std=0.0,
    ))
    zero, blurred = rows[0].mean, [r.mean for r in rows if r.reference.startswith("blurred")]
    if blurred and zero < max(blurred):
        audit_log("metric.entropy.note", note="zero-image entropy below blurred-reference entropy")
    return rows


# ---------------------------------------------------------------------------
# Colour bias
# ---------------------------------------------------------------------------

# positions of B, G, R (stored order) in the swapped image
_PERMUTATIONS = {
    ColorPermutation.RBG: np.array([2, 0, 1]),
    ColorPermutation.GRB: np.array([1, 2, 0]),
}


def color_swap(x: Tensor, perm: ColorPermutation | str) -> Tensor:
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"colour swap needs a [3, H, W] image, got {x.shape}")
    return x[_PERMUTATIONS[ColorPermutation(perm)]]


def color_unswap(x: Tensor, perm: ColorPermutation | str) -> Tensor:
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"colour swap needs a [3, H, W] image, got {x.shape}")
    return x[np.argsort(_PERMUTATIONS[ColorPermutation(perm)])]


def color_bias_ratio(
    net: Network, dataset: Dataset, class_id: int, class_name: Optional[str] = None
) -> ColorBiasRow:
    """Share of correctly classified class images that keep their label after each swap."""
    if dataset.image_shape[0] != 3:
        raise FgvisError("colour-bias analysis needs a 3-channel dataset")
    name = class_name if class_name is not None else str(class_id)
    correct = [
        dataset.images[i]
        for i in np.flatnonzero(dataset.labels == class_id)
        if forward(net, dataset.images[i]).predicted == class_id
    ]
    if not correct:
        return ColorBiasRow(ID=class_id, class_name=name, n=0)
    kept = {}
    for perm in ColorPermutation:
        hits = sum(forward(net, color_swap(x, perm)).predicted == class_id for x in correct)
        kept[perm.value] = hits / len(correct)
    return ColorBiasRow(
        ID=class_id,
        class_name=name,
        n=len(correct),
        avg=(kept["RBG"] + kept["GRB"]) / 2,
        **kept,
    )


def color_bias_report(
    net: Network, dataset: Dataset, class_names: Optional[Sequence[str]] = None
) -> list[ColorBiasRow]:
    return [
        color_bias_ratio(net, dataset, c, class_names[c] if class_names else None)
        for c in range(net.num_classes)
    ]


# ---------------------------------------------------------------------------
# Binarization
# ---------------------------------------------------------------------------

def binarize_mask(imp: Tensor, threshold_frac: float = 0.04) -> Tensor:
    """1 where imp >= threshold_frac * max(imp), else 0; all-zero maps stay zero."""
    imp = np.asarray(imp)
    if imp.size and imp.min() < 0:
        raise ValueError("importance map must be nonnegative")
    peak = float(imp.max()) if imp.size else 0.0
    if peak <= 0:
        return np.zeros_like(imp, dtype=np.float32)
    return (imp >= threshold_frac * peak).astype(np.float32)
