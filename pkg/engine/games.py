"""
fgvis — Explanation Games
=========================
Mask optimization for the preservation, deletion, generation and repression
games, with the clip-site defense active by default.

One step of the loop:
    e = x * m + (1 - m) * r
    similarity gradient at the logits -> backward to e (filtered at clip sites)
    chain to the mask through (x - r), add the sparsity term outside the network,
    divide by the max-abs entry, descend, clamp to [0, 1].

Deletion and repression maximize their objective; they are run as
minimization of its negation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from shared.datasets import raw_units_to_model
from shared.middleware import audit_log
from shared.models import (
    DEFAULT_LINE_SEARCH,
    SCORE_DROP_FACTOR,
    DivergenceError,
    FgvisError,
    GameConfig,
    GameKind,
    GameKindError,
    LineSearchPlan,
    Normalization,
    ReferenceKind,
    RenderKind,
    Similarity,
    StopCriterion,
)
from shared.tensor import (
    ReduceKind,
    Rng,
    Tensor,
    all_finite,
    check_same_shape,
    clamp01,
    gaussian_blur,
    reduce,
    uniform_noise,
)

from .network import ActivationBounds, Network, backward, capture_bounds, forward

CE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# State / results
# ---------------------------------------------------------------------------

@dataclass
class MaskState:
    mask: Tensor
    iteration: int = 0
    loss_trace: list[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class StepInfo:
    """Handed to a step hook after each update."""

    iteration: int
    mask: Tensor  # after the step
    gradient: Tensor  # normalized mask gradient used for the step
    scores: Tensor  # scores of the explanation before the step
    loss: float


StepHook = Callable[[StepInfo], Optional[bool]]


@dataclass(frozen=True, eq=False)
class ExplanationResult:
    mask: Tensor
    explanation: Tensor
    image: Tensor
    reference: Tensor
    game: GameKind
    target_class: int
    chosen_lambda: float
    score_of_target: float
    scores: Tensor
    original_class: int
    original_score: float
    iterations: int
    converged: bool

    @property
    def explanation_class(self) -> int:
        return int(np.argmax(self.scores))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def apply_mask(x: Tensor, m: Tensor, r: Tensor) -> Tensor:
    """Removal operator: e = x * m + (1 - m) * r."""
    check_same_shape(x, m, "image and mask")
    check_same_shape(x, r, "image and reference")
    if m.size and (m.min() < 0 or m.max() > 1):
        raise FgvisError("mask values must lie in [0, 1]")
    return x * m + (1 - m) * r


def similarity_loss(scores: Tensor, target: int, kind: Similarity | str) -> float:
    p = float(scores[target])
    if Similarity(kind) is Similarity.CROSS_ENTROPY:
        return -math.log(max(p, CE_FLOOR))
    return -p


def _similarity_logit_gradient(scores: Tensor, target: int, kind: Similarity) -> Tensor:
    """d(similarity)/d(logits); cross-entropy uses the exact log-softmax gradient."""
    onehot = np.zeros_like(scores)
    onehot[target] = 1
    if kind is Similarity.CROSS_ENTROPY:
        return scores - onehot
    return -scores[target] * (onehot - scores)


def game_objective(game: GameKind | str, sim: float, m: Tensor, lambda_: float) -> float:
    """Loss minimized by the optimizer for one game."""
    if lambda_ < 0:
        raise ValueError("lambda must be nonnegative")
    l1 = reduce(np.abs(m), ReduceKind.SUM)
    value = sim + lambda_ * l1
    return -value if GameKind(game).removes_evidence else value


def init_mask(game: GameKind | str, shape: tuple[int, ...], rng: Rng) -> MaskState:
    """U(0.99, 1) for preservation/deletion, U(0, 0.01) for generation/repression."""
    if GameKind(game).starts_full:
        return MaskState(mask=uniform_noise(shape, 0.99, 1.0, rng))
    return MaskState(mask=uniform_noise(shape, 0.0, 0.01, rng))


def make_reference(x: Tensor, cfg: GameConfig, rng: Rng, norm: Normalization) -> Tensor:
    if cfg.reference is ReferenceKind.ZERO:
        return np.zeros_like(x)
    if cfg.reference is ReferenceKind.GAUSSIAN_NOISE:
        scale = raw_units_to_model(cfg.reference_sigma, norm)[:, None, None]
        return (rng.normal(x.shape, 1.0, dtype=np.float64) * scale).astype(x.dtype)
    return gaussian_blur(x, cfg.reference_sigma)


def resolve_target(net: Network, x: Tensor, cfg: GameConfig) -> int:
    if cfg.target_class is None:
        return forward(net, x).predicted
    if cfg.target_class >= net.num_classes:
        raise FgvisError(f"target class {cfg.target_class} >= class count {net.num_classes}")
    return cfg.target_class


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def optimize_mask(
    net: Network,
    x: Tensor,
    cfg: GameConfig,
    *,
    bounds: Optional[ActivationBounds] = None,
    reference: Optional[Tensor] = None,
    step_hook: Optional[StepHook] = None,
) -> MaskState:
    """
    Run cfg.iterations SGD steps of cfg.game. Bounds are captured from x unless
    supplied; cfg.defended=False disables filtering. A step hook returning True
    stops the loop early.
    """
    x = np.asarray(x, dtype=net.dtype)
    target = resolve_target(net, x, cfg)
    if cfg.defended:
        bounds = bounds if bounds is not None else capture_bounds(net, x)
    else:
        bounds = None
    rng = Rng(cfg.seed)
    state = init_mask(cfg.game, x.shape, rng)
    r = reference if reference is not None else make_reference(
        x, cfg, rng.spawn(1), net.normalization
    )
    delta = x - r
    kind = cfg.similarity_kind
    sign = -1.0 if cfg.game.removes_evidence else 1.0
    lam = cfg.lambda_

    m = state.mask
    for it in range(cfg.iterations):
        tape = forward(net, apply_mask(x, m, r))
        scores = tape.scores
        loss = game_objective(cfg.game, similarity_loss(scores, target, kind), m, lam)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at iteration {it} (game={cfg.game.value}, lambda={lam})"
            )
        g_logits = _similarity_logit_gradient(scores, target, kind)
        g_sim = backward(net, tape, g_logits, bounds=bounds, from_logits=True).input * delta
        grad = sign * (g_sim + lam)
        if not all_finite(grad):
            raise DivergenceError(f"non-finite mask gradient at iteration {it}")
        peak = reduce(grad, ReduceKind.MAX_ABS)
        if peak > 0:
            grad = grad / peak
        m = clamp01(m - cfg.learning_rate * grad)
        state.loss_trace.append(loss)
        state.iteration = it + 1
        state.mask = m
        if step_hook is not None and step_hook(
            StepInfo(iteration=it + 1, mask=m, gradient=grad, scores=scores, loss=loss)
        ):
            break
    return state


def _finish(
    net: Network,
    x: Tensor,
    r: Tensor,
    state: MaskState,
    cfg: GameConfig,
    target: int,
    original: Tensor,
    converged: bool = False,
) -> ExplanationResult:
    e = apply_mask(x, state.mask, r)
    scores = forward(net, e).scores
    original_class = int(np.argmax(original))
    return ExplanationResult(
        mask=state.mask,
        explanation=e,
        image=x,
        reference=r,
        game=cfg.game,
        target_class=target,
        chosen_lambda=cfg.lambda_,
        score_of_target=float(scores[target]),
        scores=scores,
        original_class=original_class,
        original_score=float(original[original_class]),
        iterations=state.iteration,
        converged=converged,
    )


def criterion_met(
    criterion: StopCriterion, game: GameKind, result: ExplanationResult, original: Tensor
) -> bool:
    """
    Line-search stop rule. GAME: deletion/repression need the most-likely class
    to move away from c_T (for a c_T that was not the original top class, the
    target score must drop below 2% of its original value instead);
    preservation/generation need c_T on top. SCORE_DROP: y_e < 0.02 * y_x.
    """
    target = result.target_class
    dropped = result.score_of_target < SCORE_DROP_FACTOR * float(original[target])
    if criterion is StopCriterion.SCORE_DROP:
        return dropped
    if game.removes_evidence:
        if target == result.original_class:
            return result.explanation_class != target
        return dropped
    return result.explanation_class == target


def explain(
    net: Network,
    x: Tensor,
    cfg: GameConfig,
    *,
    bounds: Optional[ActivationBounds] = None,
    step_hook: Optional[StepHook] = None,
) -> ExplanationResult:
    """One run at the configured lambda."""
    x = np.asarray(x, dtype=net.dtype)
    target = resolve_target(net, x, cfg)
    cfg = cfg.model_copy(update={"target_class": target})
    original = forward(net, x).scores
    r = make_reference(x, cfg, Rng(cfg.seed).spawn(1), net.normalization)
    state = optimize_mask(net, x, cfg, bounds=bounds, reference=r, step_hook=step_hook)
    result = _finish(net, x, r, state, cfg, target, original)
    return replace(result, converged=criterion_met(StopCriterion.GAME, cfg.game, result, original))


def line_search_lambda(
    net: Network,
    x: Tensor,
    base: GameConfig,
    plan: LineSearchPlan = DEFAULT_LINE_SEARCH,
) -> ExplanationResult:
    """
    Try plan.lambdas in order (largest first) and return the first result that
    meets the stop rule; otherwise the last attempt with converged=False.
    """
    x = np.asarray(x, dtype=net.dtype)
    target = resolve_target(net, x, base)
    original = forward(net, x).scores
    bounds = capture_bounds(net, x) if base.defended else None
    update = {"target_class": target}
    if plan.learning_rate is not None:
        update["learning_rate"] = plan.learning_rate
    base = base.model_copy(update=update)
    r = make_reference(x, base, Rng(base.seed).spawn(1), net.normalization)

    result: Optional[ExplanationResult] = None
    for attempt, lam in enumerate(plan.lambdas):
        cfg = base.model_copy(update={"lambda_": lam})
        state = optimize_mask(net, x, cfg, bounds=bounds, reference=r)
        result = _finish(net, x, r, state, cfg, target, original)
        ok = criterion_met(plan.criterion, cfg.game, result, original)
        audit_log(
            "explain.line_search.attempt",
            attempt=attempt,
            lambda_=lam,
            target_score=result.score_of_target,
            explanation_class=result.explanation_class,
            met=ok,
        )
        if ok:
            return replace(result, converged=True)
    return result


# ---------------------------------------------------------------------------
# Visualization products
# ---------------------------------------------------------------------------

def render(result: ExplanationResult, kind: RenderKind | str) -> Tensor:
    """
    mask / complementary_mask / explanation keep the image shape; mean_mask is
    [1, H, W] (complement averaged for deletion/repression); deletion_explanation
    is x * (1 - m) and exists only for deletion/repression results.
    """
    kind = RenderKind(kind)
    m = result.mask
    if kind is RenderKind.MASK:
        return m
    if kind is RenderKind.COMPLEMENTARY_MASK:
        return 1 - m
    if kind is RenderKind.MEAN_MASK:
        shown = 1 - m if result.game.removes_evidence else m
        return shown.mean(axis=0, keepdims=True)
    if kind is RenderKind.EXPLANATION:
        return result.explanation
    if not result.game.removes_evidence:
        raise GameKindError(f"deletion_explanation is undefined for the {result.game.value} game")
    return result.image * (1 - m)
