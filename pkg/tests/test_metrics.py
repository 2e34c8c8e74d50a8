"""
Tests for the evaluation metrics: deletion schedule and curves, importance
sources, entropy report, colour-swap bias and mask binarization.

Run: pytest tests/test_metrics.py -v
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from engine.games import explain
from engine.metrics import (
    binarize_mask,
    color_bias_ratio,
    color_bias_report,
    color_swap,
    color_unswap,
    deletion_curve,
    deletion_schedule,
    entropy,
    importance_map,
    input_gradient_importance,
    random_importance,
    reference_entropy_report,
    removal_masks,
    removal_order,
    trapezoid_auc,
)
from engine.network import Conv2d, forward
from shared.datasets import Dataset, dataset_from_arrays
from shared.models import FgvisError, GameConfig, GameKindError, ShapeError
from shared.tensor import Rng

from .conftest import labelled_by, raw_images


class TestSchedule:
    def test_shape_and_ends(self):
        f = deletion_schedule()
        assert len(f) == 176
        assert f[0] == 0.0 and f[-1] == 1.0
        assert np.all(np.diff(f) > 0)

    def test_fine_then_coarse(self):
        f = deletion_schedule()
        assert f[1] == pytest.approx(0.0025)
        assert f[100] == pytest.approx(0.25)
        assert f[101] == pytest.approx(0.26)


class TestAuc:
    def test_constant(self):
        assert trapezoid_auc([0.0, 0.5, 1.0], [1.0, 1.0, 1.0]) == pytest.approx(1.0)

    def test_linear_decay(self):
        x = np.linspace(0, 1, 11)
        assert trapezoid_auc(x, 1 - x) == pytest.approx(0.5)


class TestRemoval:
    def test_order_descending_with_row_major_ties(self):
        imp = np.array([[0.5, 1.0], [0.5, 0.0]])
        assert removal_order(imp).tolist() == [1, 0, 2, 3]

    def test_counts_round_half_up(self):
        imp = np.zeros((2, 4))
        counts = [int(m.sum()) for m in removal_masks(imp, [0.0, 0.0625, 0.25, 1.0])]
        assert counts == [0, 1, 2, 8]

    def test_ties_removed_in_row_major_order(self):
        masks = list(removal_masks(np.ones((3, 3)), [4 / 9]))
        assert masks[0].ravel().tolist() == [True] * 4 + [False] * 5


class TestDeletionCurve:
    def test_endpoints(self, tiny_net, tiny_image):
        imp = Rng(0).random((8, 8))
        curve = deletion_curve(tiny_net, tiny_image, imp)
        target = forward(tiny_net, tiny_image).predicted
        assert curve.target_class == target
        assert len(curve.probs) == 176
        assert curve.probs[0] == pytest.approx(float(forward(tiny_net, tiny_image).scores[target]))
        zeros = np.zeros_like(tiny_image)
        assert curve.probs[-1] == pytest.approx(float(forward(tiny_net, zeros).scores[target]))
        assert curve.auc == pytest.approx(trapezoid_auc(curve.fractions, curve.probs))

    def test_custom_fractions(self, tiny_net, tiny_image):
        curve = deletion_curve(tiny_net, tiny_image, np.ones((8, 8)), [0.0, 1.0])
        assert curve.fractions.tolist() == [0.0, 1.0]

    def test_map_shape_checked(self, tiny_net, tiny_image):
        with pytest.raises(ShapeError):
            deletion_curve(tiny_net, tiny_image, np.ones((4, 4)))


class TestImportance:
    def test_deletion_game_map(self, tiny_net, tiny_image):
        result = explain(tiny_net, tiny_image, GameConfig(game="deletion", iterations=2))
        imp = importance_map(result)
        assert imp.shape == (8, 8)
        assert np.allclose(imp, (1 - result.mask).mean(axis=0))

    def test_other_games_rejected(self, tiny_net, tiny_image):
        result = explain(tiny_net, tiny_image, GameConfig(game="preservation", iterations=1))
        with pytest.raises(GameKindError):
            importance_map(result)

    def test_random_is_a_permutation(self):
        imp = random_importance((4, 5), Rng(0))
        assert sorted(imp.ravel().tolist()) == list(range(20))

    def test_input_gradient(self, color_net):
        imp = input_gradient_importance(color_net, Rng(3).normal(color_net.input_shape))
        assert imp.shape == (8, 8)
        assert (imp >= 0).all()


class TestEntropy:
    def test_uniform_and_onehot(self):
        assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))
        assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_thousand_class_uniform(self):
        assert entropy(np.full(1000, 1e-3)) == pytest.approx(math.log(1000), abs=1e-12)
        assert round(entropy(np.full(1000, 1e-3)), 2) == 6.91

    def test_bounded_by_log_class_count(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = int(rng.integers(2, 50))
            p = rng.dirichlet(np.full(c, 0.5))
            assert 0.0 <= entropy(p) <= math.log(c) + 1e-12

    def test_report_rows(self, tiny_net, tiny_dataset):
        rows = reference_entropy_report(tiny_net, tiny_dataset, 3, Rng(0))
        names = [r.reference for r in rows]
        assert names == [
            "zero image",
            "gaussian noise (sigma_n=8)",
            "gaussian noise (sigma_n=32)",
            "blurred image (sigma_b=5)",
            "blurred image (sigma_b=10)",
            "dataset image",
            "maximum (4 classes)",
        ]
        assert rows[0].std == 0.0
        assert rows[-1].mean == pytest.approx(math.log(4))
        assert all(0.0 <= r.mean <= math.log(4) + 1e-5 for r in rows)

    def test_report_needs_trials(self, tiny_net, tiny_dataset):
        with pytest.raises(ValueError):
            reference_entropy_report(tiny_net, tiny_dataset, 0, Rng(0))


class TestColorBias:
    def test_swap_permutes_channels(self):
        x = np.stack([np.full((2, 2), v, dtype=np.float32) for v in (0.0, 1.0, 2.0)])  # B, G, R
        assert color_swap(x, "RBG")[:, 0, 0].tolist() == [2.0, 0.0, 1.0]
        assert color_swap(x, "GRB")[:, 0, 0].tolist() == [1.0, 2.0, 0.0]

    @pytest.mark.parametrize("perm", ["RBG", "GRB"])
    def test_unswap_inverts(self, perm):
        x = Rng(0).normal((3, 4, 4))
        assert np.array_equal(color_unswap(color_swap(x, perm), perm), x)

    @pytest.mark.parametrize("perm", ["RBG", "GRB"])
    def test_swap_then_unswap_keeps_logits(self, color_net, perm):
        rng = Rng(4)
        for _ in range(10):
            x = rng.normal(color_net.input_shape)
            restored = color_unswap(color_swap(x, perm), perm)
            assert np.array_equal(forward(color_net, restored).logits, forward(color_net, x).logits)

    def test_swap_needs_three_channels(self, tiny_image):
        with pytest.raises(ShapeError):
            color_swap(tiny_image, "RBG")

    def test_channel_symmetric_model_is_unbiased(self, color_net):
        layers = list(color_net.layers)
        conv = layers[0]
        assert isinstance(conv, Conv2d)
        shared = np.repeat(conv.weight[:, :1], 3, axis=1)
        layers[0] = replace(conv, weight=shared)
        net = replace(color_net, layers=tuple(layers))
        data = dataset_from_arrays(
            raw_images(16, (3, 8, 8), seed=2), np.zeros(16, dtype=np.int64), net.normalization
        )
        data = labelled_by(net, data)
        rows = [r for r in color_bias_report(net, data) if r.n]
        assert rows
        assert all(r.RBG == 1.0 and r.GRB == 1.0 and r.avg == 1.0 for r in rows)

    def test_class_without_images(self, color_net):
        data = dataset_from_arrays(
            raw_images(4, (3, 8, 8)), np.zeros(4, dtype=np.int64), color_net.normalization
        )
        row = color_bias_ratio(color_net, data, 3, "cat")
        assert row.n == 0
        assert row.avg is None and row.RBG is None and row.GRB is None
        assert row.model_dump(by_alias=True)["class"] == "cat"

    def test_needs_colour_data(self, tiny_net, tiny_dataset):
        with pytest.raises(FgvisError):
            color_bias_ratio(tiny_net, tiny_dataset, 0)


class TestBinarize:
    def test_threshold(self):
        imp = np.array([0.0, 0.03, 0.04, 1.0])
        assert binarize_mask(imp).tolist() == [0.0, 0.0, 1.0, 1.0]

    def test_all_zero(self):
        assert not binarize_mask(np.zeros((2, 2))).any()

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            binarize_mask(np.array([-0.1, 1.0]))


def test_dataset_labels_are_predictions(tiny_net, tiny_dataset):
    assert isinstance(tiny_dataset, Dataset)
    preds = [forward(tiny_net, x).predicted for x in tiny_dataset.images]
    assert tiny_dataset.labels.tolist() == preds
