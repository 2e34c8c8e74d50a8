"""
Tests for data sets: normalization, loading IDX splits, and the remote fetch
(httpx MockTransport, no network).

Run: pytest tests/test_datasets.py -v
"""

import gzip

import httpx
import numpy as np
import pytest

from shared.datasets import (
    SPLIT_FILES,
    Dataset,
    DatasetFetcher,
    black_image,
    compute_normalization,
    dataset_from_arrays,
    denormalize,
    load_split,
    normalize,
    raw_units_to_model,
)
from shared.formats import encode_idx
from shared.models import Normalization, ShapeError

from .conftest import raw_images


class TestNormalization:
    def test_matches_direct_statistics(self):
        raw = raw_images(5, (2, 4, 4))
        norm = compute_normalization(raw)
        pixels = raw.astype(np.float64) / 255.0
        assert norm.mean == pytest.approx(tuple(pixels.mean(axis=(0, 2, 3))))
        assert norm.std == pytest.approx(tuple(pixels.std(axis=(0, 2, 3))))

    def test_constant_channel_gets_unit_std(self):
        norm = compute_normalization(np.zeros((2, 1, 3, 3), dtype=np.uint8))
        assert norm.std == (1.0,)

    def test_zero_tensor_is_the_mean_colour(self):
        norm = Normalization(mean=(0.5,), std=(0.25,))
        assert np.allclose(denormalize(np.zeros((1, 2, 2)), norm), 0.5)

    def test_black_image(self):
        norm = Normalization(mean=(0.5,), std=(0.25,))
        assert np.allclose(black_image((1, 2, 2), norm), -2.0)

    def test_normalize_inverts(self):
        norm = Normalization(mean=(0.2, 0.4, 0.6), std=(0.1, 0.2, 0.3))
        pixels = np.random.default_rng(0).random((3, 4, 4))
        assert np.allclose(denormalize(normalize(pixels, norm), norm), pixels, atol=1e-6)

    def test_raw_units(self):
        norm = Normalization(mean=(0.0, 0.0), std=(0.5, 1.0))
        assert raw_units_to_model(25.5, norm).tolist() == pytest.approx([0.2, 0.1])


class TestDataset:
    def test_from_grey_arrays(self):
        raw = raw_images(4, (5, 5))
        data = dataset_from_arrays(raw, [0, 1, 2, 3], name="digits")
        assert data.images.shape == (4, 1, 5, 5)
        assert data.images.dtype == np.float32
        assert data.ids == ("digits-00000", "digits-00001", "digits-00002", "digits-00003")
        assert np.allclose(denormalize(data.images, data.normalization), raw[:, None] / 255.0,
                           atol=1e-6)

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((2, 1, 2, 2), dtype=np.float32), np.zeros(3, dtype=np.int64),
                    Normalization.identity(1))

    def test_check_labels(self):
        data = dataset_from_arrays(raw_images(2, (3, 3)), [0, 5])
        with pytest.raises(ShapeError):
            data.check_labels(4)

    def test_subset_keeps_ids(self):
        data = dataset_from_arrays(raw_images(5, (3, 3)), [0, 1, 2, 3, 4], name="d")
        sub = data.subset([4, 1])
        assert sub.ids == ("d-00004", "d-00001")
        assert sub.labels.tolist() == [4, 1]

    def test_renormalized(self):
        data = dataset_from_arrays(raw_images(3, (3, 3)), [0, 0, 0])
        other = data.renormalized(Normalization.identity(1))
        assert np.allclose(other.images, denormalize(data.images, data.normalization), atol=1e-6)


def write_split(directory, split: str, n: int, compress: bool) -> np.ndarray:
    images_stem, labels_stem = SPLIT_FILES[split]
    raw = raw_images(n, (6, 6))
    for stem, array in ((images_stem, raw), (labels_stem, np.arange(n, dtype=np.uint8) % 10)):
        data = encode_idx(array)
        if compress:
            (directory / f"{stem}.gz").write_bytes(gzip.compress(data))
        else:
            (directory / stem).write_bytes(data)
    return raw


class TestLoadSplit:
    @pytest.mark.parametrize("compress", [False, True])
    def test_loads(self, tmp_path, compress):
        write_split(tmp_path, "test", 7, compress)
        data = load_split(tmp_path, "test")
        assert len(data) == 7
        assert data.image_shape == (1, 6, 6)
        assert data.name == "test"

    def test_uses_given_normalization(self, tmp_path):
        write_split(tmp_path, "train", 3, False)
        norm = Normalization(mean=(0.5,), std=(0.5,))
        assert load_split(tmp_path, "train", norm).normalization == norm

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path, "train")

    def test_unknown_split(self, tmp_path):
        with pytest.raises(ValueError):
            load_split(tmp_path, "validation")


class TestFetch:
    def test_downloads_all_files(self, tmp_path, audit_events):
        requested = []

        def handler(request: httpx.Request) -> httpx.Response:
            requested.append(request.url.path.rsplit("/", 1)[-1])
            return httpx.Response(200, content=b"payload")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        paths = DatasetFetcher(base_url="https://mirror.test/digits").fetch(tmp_path, client)
        expected = sorted(f"{stem}.gz" for stems in SPLIT_FILES.values() for stem in stems)
        assert sorted(requested) == expected
        assert sorted(p.name for p in paths) == expected
        assert all(p.read_bytes() == b"payload" for p in paths)
        assert sum(e["event_type"] == "fetch.done" for e in audit_events) == 4

    def test_skips_existing(self, tmp_path):
        stem = SPLIT_FILES["train"][0]
        (tmp_path / f"{stem}.gz").write_bytes(b"kept")
        requested = []

        def handler(request: httpx.Request) -> httpx.Response:
            requested.append(request.url.path)
            return httpx.Response(200, content=b"new")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        DatasetFetcher(base_url="https://mirror.test").fetch(tmp_path, client)
        assert len(requested) == 3
        assert (tmp_path / f"{stem}.gz").read_bytes() == b"kept"

    def test_retries_server_errors(self, tmp_path, audit_events):
        calls = {"n": 0}

        def handler(request: httpx.Request) -> httpx.Response:
            calls["n"] += 1
            if calls["n"] == 1:
                return httpx.Response(503)
            return httpx.Response(200, content=b"ok")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        DatasetFetcher(base_url="https://mirror.test").fetch(tmp_path, client)
        assert calls["n"] == 5
        assert any(e["event_type"] == "fetch.retry" for e in audit_events)

    def test_client_errors_are_not_retried(self, tmp_path):
        calls = {"n": 0}

        def handler(request: httpx.Request) -> httpx.Response:
            calls["n"] += 1
            return httpx.Response(404)

        client = httpx.Client(transport=httpx.MockTransport(handler))
        with pytest.raises(httpx.HTTPStatusError):
            DatasetFetcher(base_url="https://mirror.test").fetch(tmp_path, client)
        assert calls["n"] == 1

    def test_from_env(self, monkeypatch):
        monkeypatch.setenv("FGVIS_DATA_URL", "https://example.invalid/")
        assert DatasetFetcher.from_env().base_url == "https://example.invalid/"
