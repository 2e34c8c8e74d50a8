"""
Shared test fixtures.

Small random networks and synthetic data sets keep every test offline and fast.
Tests marked `fixture` need the trained digit model and the public digit set:
point FGVIS_FIXTURE_MODEL at an FGV1 file and FGVIS_DATA_DIR at the IDX files.
"""

import logging
import os

import numpy as np
import pytest

from engine.modelfile import load_model
from engine.network import Network, build_network, predict
from shared.datasets import Dataset, dataset_from_arrays, load_split
from shared.models import ArchSpec, Normalization
from shared.tensor import Rng

TINY_ARCH = ArchSpec(
    input_shape=(1, 8, 8), num_classes=4, conv_channels=(3,), kernel_size=3, padding=1, pool=2
)
COLOR_ARCH = ArchSpec(
    input_shape=(3, 8, 8), num_classes=4, conv_channels=(4,), kernel_size=3, padding=1, pool=2
)


def raw_images(n: int, shape: tuple[int, ...], seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(n, *shape), dtype=np.uint8)


def labelled_by(net: Network, dataset: Dataset) -> Dataset:
    """Same images, labels replaced by the network's predictions."""
    labels = np.array([predict(net, x)[0] for x in dataset.images], dtype=np.int64)
    return Dataset(dataset.images, labels, dataset.normalization, dataset.name)


@pytest.fixture
def tiny_net() -> Network:
    return build_network(TINY_ARCH, Rng(0), Normalization(mean=(0.5,), std=(0.25,)))


@pytest.fixture
def color_net() -> Network:
    return build_network(
        COLOR_ARCH, Rng(1), Normalization(mean=(0.4, 0.5, 0.6), std=(0.2, 0.25, 0.3))
    )


@pytest.fixture
def tiny_image(tiny_net) -> np.ndarray:
    return Rng(7).normal(tiny_net.input_shape)


@pytest.fixture
def tiny_dataset(tiny_net) -> Dataset:
    data = dataset_from_arrays(
        raw_images(12, (1, 8, 8)),
        np.zeros(12, dtype=np.int64),
        tiny_net.normalization,
        name="synthetic",
    )
    return labelled_by(tiny_net, data)


@pytest.fixture
def audit_events():
    """Collect audit event payloads emitted while the test runs."""
    events: list[dict] = []

    class _Collector(logging.Handler):
        def emit(self, record: logging.LogRecord) -> None:
            if hasattr(record, "extra_data"):
                events.append(dict(record.extra_data))

    logger = logging.getLogger("fgvis")
    handler = _Collector(level=logging.DEBUG)
    logger.addHandler(handler)
    old_level = logger.level
    logger.setLevel(logging.DEBUG)
    try:
        yield events
    finally:
        logger.removeHandler(handler)
        logger.setLevel(old_level)


# ---------------------------------------------------------------------------
# Trained fixture (opt-in)
# ---------------------------------------------------------------------------

def _fixture_paths():
    model, data = os.getenv("FGVIS_FIXTURE_MODEL"), os.getenv("FGVIS_DATA_DIR")
    if not (model and data and os.path.exists(model) and os.path.isdir(data)):
        pytest.skip("FGVIS_FIXTURE_MODEL / FGVIS_DATA_DIR not set")
    return model, data


@pytest.fixture(scope="session")
def fixture_model() -> Network:
    model, _ = _fixture_paths()
    return load_model(model)


@pytest.fixture(scope="session")
def fixture_test_set(fixture_model) -> Dataset:
    _, data = _fixture_paths()
    return load_split(data, "test", fixture_model.normalization)
