"""
fgvis — Shared Domain Models
Pydantic models for every configuration and record that crosses a module
boundary (CLI flags, run config files, CSV rows, manifests), plus the error
hierarchy used across the engine.
"""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class FgvisError(ValueError):
    """Base class for all domain errors."""


class ShapeError(FgvisError):
    """Tensor shapes do not compose."""


class FormatError(FgvisError):
    """A byte buffer does not hold the expected container."""

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class DivergenceError(FgvisError):
    """Mask optimization produced a non-finite loss."""


class EmptyEligibleSetError(FgvisError):
    pass


class GameKindError(FgvisError):
    """Operation is not defined for the result's game."""


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------

class GameKind(str, Enum):
    PRESERVATION = "preservation"
    DELETION = "deletion"
    GENERATION = "generation"
    REPRESSION = "repression"

    @property
    def starts_full(self) -> bool:
        """Mask initialized near 1 (preservation/deletion) rather than near 0."""
        return self in (GameKind.PRESERVATION, GameKind.DELETION)

    @property
    def removes_evidence(self) -> bool:
        """Deletion-style objective: Eq. 3 argmax, complementary visualizations."""
        return self in (GameKind.DELETION, GameKind.REPRESSION)


class Similarity(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    NEGATIVE_PROBABILITY = "negative_probability"


class ReferenceKind(str, Enum):
    ZERO = "zero"
    GAUSSIAN_NOISE = "gaussian_noise"
    BLURRED = "blurred"


class StopCriterion(str, Enum):
    # class shift for deletion/repression, top class for preservation/generation
    GAME = "game"
    # y_e[c_T] < 0.02 * y_x[c_T]
    SCORE_DROP = "score_drop"


class RenderKind(str, Enum):
    MASK = "mask"
    COMPLEMENTARY_MASK = "complementary_mask"
    MEAN_MASK = "mean_mask"
    EXPLANATION = "explanation"
    DELETION_EXPLANATION = "deletion_explanation"


class ColorPermutation(str, Enum):
    RBG = "RBG"
    GRB = "GRB"


# ---------------------------------------------------------------------------
# Explanation configuration
# ---------------------------------------------------------------------------

SCORE_DROP_FACTOR = 0.02


class GameConfig(BaseModel):
    """All hyperparameters of one mask-optimization run."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, extra="forbid")

    game: GameKind = GameKind.DELETION
    target_class: Optional[int] = Field(
        None, ge=0, description="Target class c_T; the most-likely class when unset"
    )
    lambda_: float = Field(0.0, alias="lambda", ge=0.0, description="Sparsity weight")
    learning_rate: float = Field(0.1, gt=0.0)
    iterations: int = Field(500, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    similarity: Optional[Similarity] = Field(
        None, description="Defaults to cross-entropy for preservation/generation, "
        "negative probability for deletion/repression"
    )
    reference: ReferenceKind = ReferenceKind.ZERO
    reference_sigma: Optional[float] = Field(
        None, gt=0.0, description="sigma_n (raw pixel units) or sigma_b (pixels)"
    )
    defended: bool = True

    @model_validator(mode="after")
    def _check_reference_sigma(self) -> "GameConfig":
        if self.reference is not ReferenceKind.ZERO and self.reference_sigma is None:
            raise ValueError(f"reference_sigma required for reference={self.reference.value}")
        return self

    @property
    def similarity_kind(self) -> Similarity:
        if self.similarity is not None:
            return self.similarity
        if self.game.removes_evidence:
            return Similarity.NEGATIVE_PROBABILITY
        return Similarity.CROSS_ENTROPY


def default_lambdas() -> tuple[float, ...]:
    """13 values, 1e-4 down to 1e-10, exponent step 0.5."""
    return tuple(float(v) for v in np.logspace(-4.0, -10.0, 13))


class LineSearchPlan(BaseModel):
    """Ordered sparsity weights tried by the lambda line search."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lambdas: tuple[float, ...] = Field(default_factory=default_lambdas, min_length=1)
    criterion: StopCriterion = StopCriterion.GAME
    learning_rate: Optional[float] = Field(None, gt=0.0, description="Overrides the game's")

    @field_validator("lambdas")
    @classmethod
    def _nonnegative(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if any(lam < 0 for lam in v):
            raise ValueError("lambda values must be nonnegative")
        return v


DEFAULT_LINE_SEARCH = LineSearchPlan()

# Importance maps for the deletion metric
DELETION_METRIC_LINE_SEARCH = LineSearchPlan(
    lambdas=tuple(float(v) for v in np.logspace(-7.0, -10.0, 4)),
    criterion=StopCriterion.SCORE_DROP,
    learning_rate=0.3,
)


# ---------------------------------------------------------------------------
# Model / training configuration
# ---------------------------------------------------------------------------

class Normalization(BaseModel):
    """Per-channel mean/std applied to [0,1] pixel values."""

    model_config = ConfigDict(frozen=True)

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @model_validator(mode="after")
    def _check(self) -> "Normalization":
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        return self

    @classmethod
    def identity(cls, channels: int) -> "Normalization":
        return cls(mean=(0.0,) * channels, std=(1.0,) * channels)


class ArchSpec(BaseModel):
    """Fixture architecture template: (conv -> relu -> maxpool) x N -> linear -> softmax."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = Field(10, ge=2)
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = Field(3, ge=1)
    padding: int = Field(1, ge=0)
    pool: int = Field(2, ge=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(5, ge=0)
    batch_size: int = Field(64, gt=0)
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    target_accuracy: float = Field(0.95, gt=0.0, le=1.0)


class DefenseConfig(BaseModel):
    """Knobs of the adversarial-class validation protocols."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    confidence: float = Field(0.99, gt=0.0, le=1.0)
    threshold: float = Field(0.9, gt=0.0, lt=1.0)
    iterations: int = Field(500, gt=0)
    learning_rate: float = Field(0.1, gt=0.0)
    seed: int = Field(0, ge=0)


# ---------------------------------------------------------------------------
# Records (CSV rows, manifests)
# ---------------------------------------------------------------------------

class DefenseTrial(BaseModel):
    image_id: str
    c_A: int
    defended: bool
    success: bool
    final_score: float
    iterations_used: int = Field(
        ..., ge=0, description="Mask updates behind final_score; 0 means the starting mask"
    )


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    accuracy: float


class DeletionSummaryRow(BaseModel):
    image_id: str
    auc: float


class ColorBiasRow(BaseModel):
    """One row of the colour-swap table; ratios are None when n == 0."""

    ID: int
    class_name: str = Field(alias="class")
    n: int
    avg: Optional[float] = None
    RBG: Optional[float] = None
    GRB: Optional[float] = None

    model_config = {"populate_by_name": True}


class EntropyRow(BaseModel):
    reference: str
    mean: float
    std: float


class RunManifest(BaseModel):
    """Key=value manifest written next to every explanation."""

    image_id: str
    game: GameKind
    target_class: int
    original_class: int
    original_score: float
    explanation_class: int
    target_score: float
    chosen_lambda: float
    learning_rate: float
    iterations: int
    converged: bool
    defended: bool
    seed: int
