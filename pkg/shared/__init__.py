from .models import (
    FgvisError, ShapeError, FormatError, ChecksumError, VersionError,
    DivergenceError, EmptyEligibleSetError, GameKindError,
    GameKind, Similarity, ReferenceKind, GameConfig, Normalization,
)
from .repository import (
    ArtifactRepository, FileSystemRepository, InMemoryRepository, render_csv,
)
