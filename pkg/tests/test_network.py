"""
Tests for the CNN engine: forward pass, clip sites, activation bounds,
filtered backward pass and the finite-difference gradient check.

Run: pytest tests/test_network.py -v
"""

from dataclasses import replace

import numpy as np
import pytest

from engine.network import (
    ActivationBounds,
    Flatten,
    Linear,
    Network,
    ReLU,
    Softmax,
    backward,
    backward_to_input,
    build_network,
    capture_bounds,
    clip_gradient,
    forward,
    gradient_check,
    predict,
)
from shared.models import FgvisError, Normalization, ShapeError
from shared.tensor import Rng

from .conftest import TINY_ARCH


def onehot(n: int, c: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[c] = 1
    return v


class TestForward:
    def test_scores_are_a_distribution(self, tiny_net, tiny_image):
        scores = forward(tiny_net, tiny_image).scores
        assert scores.shape == (4,)
        assert (scores >= 0).all()
        assert scores.sum() == pytest.approx(1.0, abs=1e-6)

    def test_batch_matches_single(self, tiny_net):
        batch = Rng(1).normal((3, *tiny_net.input_shape))
        batched = forward(tiny_net, batch).scores
        for i in range(3):
            assert np.allclose(batched[i], forward(tiny_net, batch[i]).scores, atol=1e-6)

    def test_wrong_input_shape(self, tiny_net):
        with pytest.raises(ShapeError):
            forward(tiny_net, np.zeros((1, 9, 8), dtype=np.float32))

    def test_predict_is_argmax(self, tiny_net, tiny_image):
        cls, scores = predict(tiny_net, tiny_image)
        assert cls == int(np.argmax(scores))

    def test_layer_shapes(self, tiny_net):
        assert tiny_net.layer_shapes[0] == (1, 8, 8)
        assert tiny_net.layer_shapes[-1] == (4,)
        assert tiny_net.num_classes == 4


class TestNetworkValidation:
    def test_softmax_must_be_last(self, tiny_net):
        with pytest.raises(FgvisError):
            replace(tiny_net, layers=tiny_net.layers[:-1])

    def test_normalization_channels(self, tiny_net):
        with pytest.raises(ShapeError):
            replace(tiny_net, normalization=Normalization.identity(3))

    def test_default_normalization_is_identity(self):
        net = build_network(TINY_ARCH, Rng(0))
        assert net.normalization == Normalization.identity(1)


class TestClipSites:
    def test_relu_only_by_default(self, tiny_net):
        sites = tiny_net.clip_sites
        assert sites == (1,)
        assert all(isinstance(tiny_net.layers[i], ReLU) for i in sites)

    def test_pooling_switch(self, tiny_net):
        assert tiny_net.with_clip_pooling().clip_sites == (1, 2)

    def test_nothing_after_final_linear(self, tiny_net):
        last_linear = max(i for i, layer in enumerate(tiny_net.layers) if isinstance(layer, Linear))
        assert all(i < last_linear for i in tiny_net.with_clip_pooling().clip_sites)


class TestBounds:
    def test_bounds_split_activation_by_sign(self, tiny_net, tiny_image):
        bounds = capture_bounds(tiny_net, tiny_image)
        h = forward(tiny_net, tiny_image).activation(1)
        assert bounds.sites == (1,)
        assert np.array_equal(bounds.upper[1], np.maximum(h, 0))
        assert np.array_equal(bounds.lower[1], np.minimum(h, 0))

    def test_forward_identity_with_bounds(self, tiny_net):
        rng = Rng(5)
        for _ in range(100):
            x = rng.normal(tiny_net.input_shape)
            bounds = capture_bounds(tiny_net, rng.normal(tiny_net.input_shape))
            plain = forward(tiny_net, x).scores
            attached = forward(tiny_net, x, bounds).scores
            assert np.array_equal(plain, attached)


class TestFilteredBackward:
    def test_clip_gradient_rule(self):
        grad = np.ones(5, dtype=np.float32)
        h = np.array([-1.0, 0.0, 0.5, 1.0, 2.0], dtype=np.float32)
        upper = np.ones(5, dtype=np.float32)
        lower = np.zeros(5, dtype=np.float32)
        assert clip_gradient(grad, h, upper, lower).tolist() == [0, 1, 1, 1, 0]

    def test_clip_gradient_randomized(self):
        rng = np.random.default_rng(6)
        n = 100_000
        # small integer grid so h == bu and h == bl ties are frequent
        h = (rng.integers(-4, 5, n) / 2).astype(np.float32)
        x = (rng.integers(-4, 5, n) / 2).astype(np.float32)
        upper, lower = np.maximum(x, 0), np.minimum(x, 0)
        grad = rng.standard_normal(n).astype(np.float32)

        out = clip_gradient(grad, h, upper, lower)
        keep = (h <= upper) & (h >= lower)
        assert out.dtype == np.float32
        assert np.array_equal(out, np.where(keep, grad, np.float32(0)))
        assert np.array_equal(out[keep].view(np.uint32), grad[keep].view(np.uint32))
        assert (h == upper).any() and (h == lower).any()

    def test_no_filtering_at_the_original_image(self, tiny_net, tiny_image):
        tape = forward(tiny_net, tiny_image)
        bounds = capture_bounds(tiny_net, tiny_image)
        g = onehot(4, 0)
        assert np.array_equal(
            backward_to_input(tiny_net, tape, g), backward_to_input(tiny_net, tape, g, bounds)
        )

    def test_zero_bounds_block_all_gradient(self, tiny_net, tiny_image):
        tape = forward(tiny_net, tiny_image)
        shape = tape.activation(1).shape
        zero = np.zeros(shape, dtype=np.float32)
        bounds = ActivationBounds(upper={1: zero}, lower={1: zero})
        grad = backward_to_input(tiny_net, tape, onehot(4, 2), bounds)
        assert not np.any(grad)

    def test_filter_matches_manual_mask(self, tiny_net):
        """Filtered backward equals plain backward with the clip-site error masked by hand."""
        rng = Rng(11)
        for _ in range(20):
            x = rng.normal(tiny_net.input_shape)
            e = rng.normal(tiny_net.input_shape)
            bounds = capture_bounds(tiny_net, x)
            tape = forward(tiny_net, e)
            g = onehot(4, int(rng.integers(4, 1)[0]))
            filtered = backward(tiny_net, tape, g, bounds=bounds).input

            # manual: run the layers above the site, mask, then the rest
            grad = g[None]
            for i in range(len(tiny_net.layers) - 1, -1, -1):
                layer = tiny_net.layers[i]
                x_in, y_out = tape.activations[i], tape.activations[i + 1]
                if i == 1:
                    keep = (y_out <= bounds.upper[1][None]) & (y_out >= bounds.lower[1][None])
                    grad = grad * keep
                grad, _ = layer.backward(grad, x_in, y_out)
            assert np.array_equal(filtered, grad[0])

    def test_attached_bounds_are_used(self, tiny_net, tiny_image):
        zero = np.zeros(forward(tiny_net, tiny_image).activation(1).shape, dtype=np.float32)
        bounds = ActivationBounds(upper={1: zero}, lower={1: zero})
        tape = forward(tiny_net, tiny_image, bounds)
        assert not np.any(backward_to_input(tiny_net, tape, onehot(4, 1)))

    def test_tape_from_other_network(self, tiny_net, tiny_image):
        other = build_network(TINY_ARCH, Rng(9), tiny_net.normalization)
        tape = forward(other, tiny_image)
        with pytest.raises(FgvisError):
            backward(tiny_net, tape, onehot(4, 0))

    def test_gradient_shape_checked(self, tiny_net, tiny_image):
        tape = forward(tiny_net, tiny_image)
        with pytest.raises(ShapeError):
            backward(tiny_net, tape, np.zeros(3, dtype=np.float32))


class TestGradientCheck:
    def test_input_gradient_matches_finite_differences(self, tiny_net, tiny_image):
        assert gradient_check(tiny_net, tiny_image, n_coords=64) < 1e-4

    def test_every_class(self, color_net):
        x = Rng(2).normal(color_net.input_shape)
        for c in range(color_net.num_classes):
            assert gradient_check(color_net, x, target=c, n_coords=32) < 1e-4

    def test_linear_only_network_is_exact(self):
        weight = np.array(
            [[1.0, -1.0, 2.0, 0.5], [-1.0, 2.0, 0.0, 1.0], [0.5, 0.0, -1.0, -2.0]]
        )
        net = Network(
            input_shape=(1, 2, 2),
            layers=(Flatten(), Linear(weight=weight, bias=np.zeros(3)), Softmax()),
            normalization=Normalization.identity(1),
        )
        x = np.zeros((1, 2, 2))
        assert gradient_check(net, x, eps=1e-5, n_coords=4) < 1e-8

    def test_kink_coordinates_are_excluded(self):
        net = Network(
            input_shape=(1, 1, 2),
            layers=(
                Flatten(),
                Linear(weight=np.eye(2), bias=np.zeros(2)),
                ReLU(),
                Linear(weight=np.array([[1.0, 0.0], [-1.0, 1.0], [0.0, -1.0]]), bias=np.zeros(3)),
                Softmax(),
            ),
            normalization=Normalization.identity(1),
        )
        # first hidden unit sits exactly on the ReLU kink; its one-sided slopes disagree
        x = np.array([[[0.0, 1.0]]])
        assert gradient_check(net, x, eps=1e-5, n_coords=2) < 1e-6

    def test_rejects_nonpositive_eps(self, tiny_net, tiny_image):
        with pytest.raises(ValueError):
            gradient_check(tiny_net, tiny_image, eps=0.0)
