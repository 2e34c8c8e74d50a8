"""
fgvis — CNN Engine
==================
Forward inference and reverse-mode backpropagation for a small CNN.

Layers are batch-native ([N, C, H, W] / [N, F]); single images are promoted to
a batch of one and the tape remembers to squeeze results again. The tape keeps
every layer input (activations[i]) and output (activations[i + 1]) so the
backward pass can recompute whatever it needs.

Clip sites sit after every ReLU (optionally after max-pooling). They are the
identity going forward. Going backward, when activation bounds are supplied,
the error arriving at a clip site is zeroed for every neuron whose current
activation lies outside [bl, bu] of the original image.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shared.middleware import get_logger
from shared.models import ArchSpec, FgvisError, Normalization, ShapeError
from shared.tensor import ENGINE_DTYPE, ORACLE_DTYPE, Rng, Tensor

logger = get_logger("network")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _out_extent(size: int, window: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - window) // stride + 1


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: Tensor  # [out, in, kh, kw]
    bias: Tensor  # [out]
    stride: int = 1
    padding: int = 0
    tag = "conv2d"

    @property
    def params(self) -> tuple[Tensor, ...]:
        return (self.weight, self.bias)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = shape
        out, cin, kh, kw = self.weight.shape
        if c != cin:
            raise ShapeError(f"conv2d expects {cin} input channels, got {c}")
        ho = _out_extent(h, kh, self.stride, self.padding)
        wo = _out_extent(w, kw, self.stride, self.padding)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w}")
        return (out, ho, wo)

    def _padded(self, x: Tensor) -> Tensor:
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def _windows(self, xp: Tensor) -> Tensor:
        kh, kw = self.weight.shape[2:]
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]  # [N, C, Ho, Wo, kh, kw]

    def forward(self, x: Tensor) -> Tensor:
        win = self._windows(self._padded(x))
        out = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, O]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + self.bias[None, :, None, None]

    def backward(self, grad: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, tuple[Tensor, ...]]:
        xp = self._padded(x)
        kh, kw = self.weight.shape[2:]
        s, p = self.stride, self.padding
        ho, wo = grad.shape[2:]
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.weight[:, :, i, j], axes=([1], [0]))
                gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib.transpose(0, 3, 1, 2)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        gw = np.tensordot(grad, self._windows(xp), axes=([0, 2, 3], [0, 2, 3]))
        gb = grad.sum(axis=(0, 2, 3))
        return gx, (gw, gb)

    def signature(self, x: Tensor) -> Optional[Tensor]:
        return None

    def astype(self, dtype) -> "Conv2d":
        return replace(self, weight=self.weight.astype(dtype), bias=self.bias.astype(dtype))


@dataclass(frozen=True, eq=False)
class ReLU:
    tag = "relu"
    params = ()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: Tensor) -> Tensor:
        return np.maximum(x, 0).astype(x.dtype, copy=False)

    def backward(self, grad: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, tuple[Tensor, ...]]:
        # subgradient 0 at exactly zero input
        return grad * (x > 0), ()

    def signature(self, x: Tensor) -> Optional[Tensor]:
        return x > 0

    def astype(self, dtype) -> "ReLU":
        return self


@dataclass(frozen=True, eq=False)
class MaxPool2d:
    window: int = 2
    stride: int = 2
    tag = "maxpool"
    params = ()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = shape
        ho, wo = _out_extent(h, self.window, self.stride), _out_extent(w, self.window, self.stride)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"maxpool window {self.window} does not fit input {h}x{w}")
        return (c, ho, wo)

    def _flat_windows(self, x: Tensor) -> Tensor:
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(*win.shape[:4], k * k)

    def forward(self, x: Tensor) -> Tensor:
        return self._flat_windows(x).max(axis=-1)

    def backward(self, grad: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, tuple[Tensor, ...]]:
        k, s = self.window, self.stride
        winner = self._flat_windows(x).argmax(axis=-1)  # ties: first in window
        ho, wo = grad.shape[2:]
        gx = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += grad * (winner == i * k + j)
        return gx, ()

    def signature(self, x: Tensor) -> Optional[Tensor]:
        return self._flat_windows(x).argmax(axis=-1)

    def astype(self, dtype) -> "MaxPool2d":
        return self


@dataclass(frozen=True, eq=False)
class Flatten:
    tag = "flatten"
    params = ()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return (int(np.prod(shape)),)

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, tuple[Tensor, ...]]:
        return grad.reshape(x.shape), ()

    def signature(self, x: Tensor) -> Optional[Tensor]:
        return None

    def astype(self, dtype) -> "Flatten":
        return self


@dataclass(frozen=True, eq=False)
class Linear:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]
    tag = "linear"

    @property
    def params(self) -> tuple[Tensor, ...]:
        return (self.weight, self.bias)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if shape != (self.weight.shape[1],):
            raise ShapeError(f"linear expects ({self.weight.shape[1]},), got {shape}")
        return (self.weight.shape[0],)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight.T + self.bias

    def backward(self, grad: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, tuple[Tensor, ...]]:
        return grad @ self.weight, (grad.T @ x, grad.sum(axis=0))

    def signature(self, x: Tensor) -> Optional[Tensor]:
        return None

    def astype(self, dtype) -> "Linear":
        return replace(self, weight=self.weight.astype(dtype), bias=self.bias.astype(dtype))


@dataclass(frozen=True, eq=False)
class Softmax:
    tag = "softmax"
    params = ()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: Tensor) -> Tensor:
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def backward(self, grad: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, tuple[Tensor, ...]]:
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True)), ()

    def signature(self, x: Tensor) -> Optional[Tensor]:
        return None

    def astype(self, dtype) -> "Softmax":
        return self


Layer = Union[Conv2d, ReLU, MaxPool2d, Flatten, Linear, Softmax]
NONLINEAR = (ReLU, MaxPool2d)


# ---------------------------------------------------------------------------
# Network / tape / bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActivationBounds:
    """Per clip site (keyed by layer index): bu = max(0, h(x)), bl = min(0, h(x))."""

    upper: dict[int, Tensor]
    lower: dict[int, Tensor]

    @property
    def sites(self) -> tuple[int, ...]:
        return tuple(sorted(self.upper))


@dataclass(frozen=True, eq=False)
class ForwardTape:
    layers: tuple[Layer, ...]
    activations: list[Tensor]  # activations[0] = input batch, activations[-1] = scores
    batched: bool
    bounds: Optional[ActivationBounds] = None

    def _unbatch(self, a: Tensor) -> Tensor:
        return a if self.batched else a[0]

    @property
    def scores(self) -> Tensor:
        return self._unbatch(self.activations[-1])

    @property
    def logits(self) -> Tensor:
        return self._unbatch(self.activations[-2])

    def activation(self, layer_index: int) -> Tensor:
        """Output of layer `layer_index` (the value h seen by a clip site after it)."""
        return self._unbatch(self.activations[layer_index + 1])

    @property
    def predicted(self) -> Union[int, Tensor]:
        top = self.activations[-1].argmax(axis=-1)
        return top if self.batched else int(top[0])


@dataclass(frozen=True, eq=False)
class Network:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    normalization: Normalization
    clip_pooling: bool = False
    layer_shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        softmax_at = [i for i, layer in enumerate(self.layers) if isinstance(layer, Softmax)]
        if softmax_at != [len(self.layers) - 1]:
            raise FgvisError("softmax must appear exactly once, as the last layer")
        if not any(isinstance(layer, Linear) for layer in self.layers):
            raise FgvisError("network needs a final linear classification layer")
        shapes = [tuple(self.input_shape)]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.tag}): {exc}") from exc
        if len(self.normalization.mean) != self.input_shape[0]:
            raise ShapeError("normalization must have one entry per input channel")
        object.__setattr__(self, "layer_shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self.layer_shapes[-1][0]

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return layer.params[0].dtype
        return np.dtype(ENGINE_DTYPE)

    @property
    def clip_sites(self) -> tuple[int, ...]:
        """Nonlinearity layers before the final classification layer."""
        last_linear = max(i for i, layer in enumerate(self.layers) if isinstance(layer, Linear))
        kinds = NONLINEAR if self.clip_pooling else (ReLU,)
        return tuple(
            i for i, layer in enumerate(self.layers[:last_linear]) if isinstance(layer, kinds)
        )

    def astype(self, dtype) -> "Network":
        return replace(self, layers=tuple(layer.astype(dtype) for layer in self.layers))

    def with_clip_pooling(self, enabled: bool = True) -> "Network":
        return replace(self, clip_pooling=enabled)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]


def build_network(
    arch: ArchSpec, rng: Rng, normalization: Optional[Normalization] = None
) -> Network:
    """
    Instantiate the fixture template with uniform fan-in initialization:
    weights ~ U(-sqrt(6 / fan_in), sqrt(6 / fan_in)), biases zero.
    """
    def uniform(shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        return ((rng.random(shape, dtype=ORACLE_DTYPE) * 2.0 - 1.0) * bound).astype(ENGINE_DTYPE)

    layers: list[Layer] = []
    shape: tuple[int, ...] = arch.input_shape
    k = arch.kernel_size
    for out_channels in arch.conv_channels:
        fan_in = shape[0] * k * k
        conv = Conv2d(
            weight=uniform((out_channels, shape[0], k, k), fan_in),
            bias=np.zeros(out_channels, dtype=ENGINE_DTYPE),
            padding=arch.padding,
        )
        pool = MaxPool2d(arch.pool, arch.pool)
        layers += [conv, ReLU(), pool]
        shape = pool.output_shape(conv.output_shape(shape))
    features = int(np.prod(shape))
    layers += [
        Flatten(),
        Linear(
            weight=uniform((arch.num_classes, features), features),
            bias=np.zeros(arch.num_classes, dtype=ENGINE_DTYPE),
        ),
        Softmax(),
    ]
    return Network(
        input_shape=arch.input_shape,
        layers=tuple(layers),
        normalization=normalization or Normalization.identity(arch.input_shape[0]),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def forward(net: Network, x: Tensor, bounds: Optional[ActivationBounds] = None) -> ForwardTape:
    """
    Run the network on one [C, H, W] image or an [N, C, H, W] batch.
    Attached bounds ride along on the tape for the backward pass; they never
    touch forward values.
    """
    batched = x.ndim == 4
    if tuple(x.shape[-3:]) != tuple(net.input_shape) or x.ndim not in (3, 4):
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    h = x if batched else x[None]
    h = h.astype(net.dtype, copy=False)
    activations = [h]
    for layer in net.layers:
        h = layer.forward(h)
        activations.append(h)
    return ForwardTape(layers=net.layers, activations=activations, batched=batched, bounds=bounds)


def predict(net: Network, x: Tensor) -> tuple[int, Tensor]:
    """Most-likely class (lowest index on ties) and the score vector."""
    tape = forward(net, x)
    return tape.predicted, tape.scores


def capture_bounds(net: Network, x: Tensor) -> ActivationBounds:
    """Record bu/bl at every clip site from the forward pass of the original image."""
    tape = forward(net, x)
    upper, lower = {}, {}
    for site in net.clip_sites:
        h = tape.activation(site)
        upper[site] = np.maximum(h, 0).astype(h.dtype, copy=False)
        lower[site] = np.minimum(h, 0).astype(h.dtype, copy=False)
    return ActivationBounds(upper=upper, lower=lower)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def clip_gradient(grad: Tensor, h: Tensor, upper: Tensor, lower: Tensor) -> Tensor:
    """gamma = gamma_bar * [h <= bu] * [h >= bl], elementwise."""
    return grad * ((h <= upper) & (h >= lower))


@dataclass
class Gradients:
    input: Tensor
    params: list[Tensor] = field(default_factory=list)


def backward(
    net: Network,
    tape: ForwardTape,
    grad: Tensor,
    *,
    bounds: Optional[ActivationBounds] = None,
    from_logits: bool = False,
    with_params: bool = False,
) -> Gradients:
    """
    Reverse-mode accumulation from the scores (or, with from_logits, from the
    pre-softmax logits) down to the input. Parameter gradients are collected
    in net.parameters() order when requested.
    """
    if tape.layers is not net.layers:
        raise FgvisError("tape was not produced by this network")
    bounds = bounds if bounds is not None else tape.bounds
    g = grad if tape.batched else grad[None]
    expected = tape.activations[-2 if from_logits else -1].shape
    if g.shape != expected:
        raise ShapeError(f"gradient shape {g.shape} does not match {expected}")
    g = g.astype(tape.activations[0].dtype, copy=False)

    sites = set(net.clip_sites) if bounds is not None else set()
    start = len(net.layers) - (2 if from_logits else 1)
    param_grads: list[list[Tensor]] = []
    for i in range(start, -1, -1):
        layer = net.layers[i]
        x_in, y_out = tape.activations[i], tape.activations[i + 1]
        if i in sites:
            g = clip_gradient(g, y_out, bounds.upper[i], bounds.lower[i])
        g, pgrads = layer.backward(g, x_in, y_out)
        if with_params:
            param_grads.append(list(pgrads))
    params = [p for group in reversed(param_grads) for p in group] if with_params else []
    return Gradients(input=g if tape.batched else g[0], params=params)


def backward_to_input(
    net: Network,
    tape: ForwardTape,
    grad_scores: Tensor,
    bounds: Optional[ActivationBounds] = None,
) -> Tensor:
    """dLoss/dInput given dLoss/dScores; bounds (argument or attached) enable filtering."""
    return backward(net, tape, grad_scores, bounds=bounds).input


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

def _kink_signature(tape: ForwardTape) -> list[Tensor]:
    sig = []
    for i, layer in enumerate(tape.layers):
        s = layer.signature(tape.activations[i])
        if s is not None:
            sig.append(s)
    return sig


def _same_signature(a: list[Tensor], b: list[Tensor]) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check(
    net: Network,
    x: Tensor,
    eps: float = 1e-4,
    *,
    n_coords: int = 100,
    target: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> float:
    """
    Max relative error of backward_to_input against central differences of
    scores[target] over a random sample of input coordinates, in float64.
    Coordinates whose +-eps probes flip a ReLU or max-pool decision are excluded.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    net64 = net.astype(ORACLE_DTYPE)
    x64 = np.asarray(x, dtype=ORACLE_DTYPE)
    tape = forward(net64, x64)
    target = tape.predicted if target is None else target
    onehot = np.zeros(net.num_classes, dtype=ORACLE_DTYPE)
    onehot[target] = 1.0
    analytic = backward_to_input(net64, tape, onehot).ravel()
    base_sig = _kink_signature(tape)

    rng = rng or Rng(0)
    coords = rng.choice(x64.size, min(n_coords, x64.size))
    worst, skipped = 0.0, 0
    for k in coords:
        probes = []
        for step in (eps, -eps):
            xp = x64.copy().ravel()
            xp[k] += step
            probes.append(forward(net64, xp.reshape(x64.shape)))
        if not all(_same_signature(base_sig, _kink_signature(p)) for p in probes):
            skipped += 1
            continue
        numeric = (probes[0].scores[target] - probes[1].scores[target]) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[k]), float(numeric)))
    if skipped:
        logger.info("gradient_check excluded %d kink coordinates of %d", skipped, len(coords))
    return worst
