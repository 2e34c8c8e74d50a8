"""
fgvis — Datasets

Labeled image sets held as normalized float32 [N, C, H, W] stacks. Pixels go
raw u8 -> [0,1] -> (v - mean_c) / std_c, so the all-zero tensor is the data-mean
colour: the zero reference image of the explanation games.

The public 28x28 digit set can be fetched with `DatasetFetcher` (httpx with
tenacity retries). Fetching is a convenience; nothing in the engine depends
on network access.

Env vars:
    FGVIS_DATA_DIR   - default directory holding the IDX files
    FGVIS_DATA_URL   - mirror base URL for `fgvis fetch`
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import httpx
import numpy as np
from numpy.typing import NDArray
from tenacity import (
    retry,
    retry_if_exception,
    stop_after_attempt,
    wait_exponential,
)

from .formats import IDX_LABEL_MAGIC, read_idx_file
from .middleware import audit_log, get_logger
from .models import FormatError, Normalization, ShapeError
from .tensor import ENGINE_DTYPE, Tensor

logger = get_logger("datasets")

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DEFAULT_DATA_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _channel_view(norm: Normalization) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    mean = np.asarray(norm.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(norm.std, dtype=np.float64)[:, None, None]
    return mean, std


def compute_normalization(raw: NDArray[np.uint8]) -> Normalization:
    """Per-channel mean/std of [N, C, H, W] u8 pixels scaled to [0,1]."""
    values = np.arange(256, dtype=np.float64) / 255.0
    means, stds = [], []
    for c in range(raw.shape[1]):
        counts = np.bincount(raw[:, c].ravel(), minlength=256).astype(np.float64)
        mean = float(counts @ values / counts.sum())
        var = float(counts @ (values - mean) ** 2 / counts.sum())
        means.append(mean)
        stds.append(float(np.sqrt(var)) if var > 0 else 1.0)
    return Normalization(mean=tuple(means), std=tuple(stds))


def _lookup_tables(norm: Normalization) -> NDArray[np.float32]:
    """[C, 256] model-space value of every u8 level."""
    mean, std = _channel_view(norm)
    levels = np.arange(256, dtype=np.float64)[None, :] / 255.0
    return ((levels - mean[:, :, 0]) / std[:, :, 0]).astype(ENGINE_DTYPE)


def normalize(pixels01: Tensor, norm: Normalization) -> Tensor:
    """[..., C, H, W] in [0,1] -> model space."""
    mean, std = _channel_view(norm)
    return ((np.asarray(pixels01, dtype=np.float64) - mean) / std).astype(ENGINE_DTYPE)


def denormalize(x: Tensor, norm: Normalization) -> Tensor:
    """Model space -> [0,1] pixel space (unclipped)."""
    mean, std = _channel_view(norm)
    return (np.asarray(x, dtype=np.float64) * std + mean).astype(ENGINE_DTYPE)


def black_image(shape: Sequence[int], norm: Normalization) -> Tensor:
    """The raw all-black image in model space (-mean / std per channel)."""
    return normalize(np.zeros(tuple(shape), dtype=np.float64), norm)


def raw_units_to_model(sigma_raw: float, norm: Normalization) -> NDArray[np.float64]:
    """Per-channel scale of a 0-255 pixel-unit standard deviation in model space."""
    return sigma_raw / 255.0 / np.asarray(norm.std, dtype=np.float64)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    images: Tensor  # [N, C, H, W], normalized
    labels: NDArray[np.int64]
    normalization: Normalization
    name: str = "data"
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ShapeError(f"dataset images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"{len(self.images)} images but {len(self.labels)} labels in {self.name}"
            )
        if not self.ids:
            object.__setattr__(
                self, "ids", tuple(f"{self.name}-{i:05d}" for i in range(len(self.labels)))
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def check_labels(self, num_classes: int) -> None:
        if len(self.labels) and int(self.labels.max()) >= num_classes:
            raise ShapeError(f"label {int(self.labels.max())} >= class count {num_classes}")

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            normalization=self.normalization,
            name=self.name,
            ids=tuple(self.ids[i] for i in idx),
        )

    def renormalized(self, norm: Normalization) -> "Dataset":
        """Same pixels expressed under another normalization (e.g. a model's)."""
        pixels = denormalize(self.images, self.normalization)
        return Dataset(normalize(pixels, norm), self.labels, norm, self.name, self.ids)


def dataset_from_arrays(
    raw_images: NDArray[np.uint8],
    labels: NDArray[np.integer],
    normalization: Optional[Normalization] = None,
    name: str = "data",
) -> Dataset:
    """Build from u8 images ([N, H, W] grey or [N, C, H, W]) and integer labels."""
    if raw_images.ndim == 3:
        raw_images = raw_images[:, None]
    if raw_images.ndim != 4:
        raise ShapeError(f"expected 3-D or 4-D image stack, got {raw_images.shape}")
    norm = normalization or compute_normalization(raw_images)
    if len(norm.mean) != raw_images.shape[1]:
        raise ShapeError(
            f"normalization has {len(norm.mean)} channels, images have {raw_images.shape[1]}"
        )
    tables = _lookup_tables(norm)
    images = np.stack([tables[c][raw_images[:, c]] for c in range(raw_images.shape[1])], axis=1)
    return Dataset(images, np.asarray(labels, dtype=np.int64), norm, name)


def load_idx_dataset(
    images_path: Path | str,
    labels_path: Path | str,
    normalization: Optional[Normalization] = None,
    name: str = "data",
) -> Dataset:
    raw = read_idx_file(images_path)
    if raw.ndim not in (3, 4):
        raise FormatError(f"{images_path}: expected a 3-D or 4-D image container", offset=0)
    labels = read_idx_file(labels_path, expected_magic=IDX_LABEL_MAGIC)
    return dataset_from_arrays(raw, labels, normalization, name)


def _resolve(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def default_data_dir() -> Path:
    return Path(os.getenv("FGVIS_DATA_DIR", "data"))


def load_split(
    data_dir: Path | str, split: str, normalization: Optional[Normalization] = None
) -> Dataset:
    """Load the standard digit-set split ('train' or 't10k'-backed 'test')."""
    if split not in SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_FILES)}")
    data_dir = Path(data_dir)
    images_stem, labels_stem = SPLIT_FILES[split]
    return load_idx_dataset(
        _resolve(data_dir, images_stem), _resolve(data_dir, labels_stem), normalization, split
    )


# ---------------------------------------------------------------------------
# Remote fetch
# ---------------------------------------------------------------------------

def _is_transient(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code >= 500
    return isinstance(exc, httpx.TransportError)


def _log_retry(retry_state) -> None:
    audit_log(
        "fetch.retry",
        attempt=retry_state.attempt_number,
        error=str(retry_state.outcome.exception()),
    )


@dataclass
class DatasetFetcher:
    """Downloads the gzip IDX files of the digit set into a data directory."""

    base_url: str = DEFAULT_DATA_URL
    timeout: float = 30.0

    @classmethod
    def from_env(cls) -> "DatasetFetcher":
        return cls(base_url=os.getenv("FGVIS_DATA_URL", DEFAULT_DATA_URL))

    @retry(
        retry=retry_if_exception(_is_transient),
        stop=stop_after_attempt(4),
        wait=wait_exponential(multiplier=0.5, max=8),
        before_sleep=_log_retry,
        reraise=True,
    )
    def _download(self, client: httpx.Client, name: str) -> bytes:
        resp = client.get(self.base_url.rstrip("/") + "/" + name, timeout=self.timeout)
        resp.raise_for_status()
        return resp.content

    def fetch(self, data_dir: Path | str, client: Optional[httpx.Client] = None) -> list[Path]:
        data_dir = Path(data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        own_client = client is None
        client = client or httpx.Client(follow_redirects=True)
        written: list[Path] = []
        try:
            for stems in SPLIT_FILES.values():
                for stem in stems:
                    target = data_dir / f"{stem}.gz"
                    if target.exists():
                        logger.info("skipping %s (already present)", target)
                        written.append(target)
                        continue
                    target.write_bytes(self._download(client, target.name))
                    audit_log("fetch.done", file=str(target))
                    written.append(target)
        finally:
            if own_client:
                client.close()
        return written
