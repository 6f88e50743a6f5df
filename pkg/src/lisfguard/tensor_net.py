"""Minimal dense CNN substrate.

Activations are numpy arrays shaped ``(channels, height, width)`` for spatial
layers and ``(n,)`` once a global layer (``GlobalAvgPool`` or
``FullyConnected``) has collapsed the spatial extent.  Every kernel below uses
a fixed loop nest over ``(in_channel, ky, kx)`` with elementwise numpy ops, so
an output cell is produced by the same sequence of float operations no matter
how large the surrounding array is.  The region-reuse code relies on that to
splice partial recomputations back bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Input or intermediate tensor has the wrong shape."""


# --------------------------------------------------------------------------
# Layer specs
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Conv:
    in_ch: int
    out_ch: int
    k: int
    s: int = 1
    p: int = 0
    weight: np.ndarray | None = None  # (out_ch, in_ch, k, k)
    bias: np.ndarray | None = None  # (out_ch,)

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.p < 0:
            raise ValueError(f"bad conv geometry k={self.k} s={self.s} p={self.p}")
        if self.weight is not None:
            if self.weight.shape != (self.out_ch, self.in_ch, self.k, self.k):
                raise ShapeError(f"conv weight shape {self.weight.shape}")
            if self.bias is None or self.bias.shape != (self.out_ch,):
                raise ShapeError("conv bias must have out_ch entries")

    kind = "conv"


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"


@dataclass(frozen=True, eq=False)
class MaxPool:
    k: int
    s: int

    def __post_init__(self):
        if self.k < 1 or self.s < 1:
            raise ValueError(f"bad pool geometry k={self.k} s={self.s}")

    p = 0
    kind = "maxpool"


@dataclass(frozen=True, eq=False)
class GlobalAvgPool:
    kind = "gap"


@dataclass(frozen=True, eq=False)
class FullyConnected:
    in_features: int
    out_features: int
    weight: np.ndarray | None = None  # (out_features, in_features)
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weight is not None:
            if self.weight.shape != (self.out_features, self.in_features):
                raise ShapeError(f"fc weight shape {self.weight.shape}")
            if self.bias is None or self.bias.shape != (self.out_features,):
                raise ShapeError("fc bias must have out_features entries")

    kind = "fc"


LayerSpec = Conv | ReLU | MaxPool | GlobalAvgPool | FullyConnected

SPATIAL_WINDOW = (Conv, MaxPool)
GLOBAL = (GlobalAvgPool, FullyConnected)


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    out = (n + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeError(f"window k={k} s={s} p={p} does not fit input of size {n}")
    return out


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, FullyConnected):
        n = int(np.prod(shape))
        if n != layer.in_features:
            raise ShapeError(f"fc expects {layer.in_features} inputs, got {shape}")
        return (layer.out_features,)
    if len(shape) != 3:
        raise ShapeError(f"{layer.kind} needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if isinstance(layer, GlobalAvgPool):
        return (c,)
    if isinstance(layer, Conv):
        if c != layer.in_ch:
            raise ShapeError(f"conv expects {layer.in_ch} channels, got {c}")
        return (layer.out_ch, conv_out_size(h, layer.k, layer.s, layer.p),
                conv_out_size(w, layer.k, layer.s, layer.p))
    return (c, conv_out_size(h, layer.k, layer.s, 0), conv_out_size(w, layer.k, layer.s, 0))


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Network:
    """Straight-line layer pipeline ending in a ``class_count`` logit vector."""

    layers: list
    input_shape: tuple[int, int, int]
    class_count: int
    split_index: int | None = None
    name: str = "net"
    _shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        if shapes[-1] != (self.class_count,):
            raise ShapeError(f"final output {shapes[-1]} is not a {self.class_count}-logit vector")
        self._shapes = shapes

    def __len__(self):
        return len(self.layers)

    def in_shape(self, i: int) -> tuple[int, ...]:
        return self._shapes[i]

    def out_shape(self, i: int) -> tuple[int, ...]:
        return self._shapes[i + 1]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """``shapes[i]`` is the input shape of layer ``i``; the last entry is the logits."""
        return list(self._shapes)

    def first_conv_index(self) -> int:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                return i
        raise ValueError("network has no conv layer")

    def feature_layer_index(self) -> int:
        """Index of the layer whose output is treated as the first-layer feature map.

        That is the first conv, or the ReLU right behind it when there is one.
        """
        i = self.first_conv_index()
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU):
            return i + 1
        return i

    def astype(self, dtype) -> "Network":
        def cast(layer):
            if isinstance(layer, (Conv, FullyConnected)) and layer.weight is not None:
                return replace(layer, weight=layer.weight.astype(dtype), bias=layer.bias.astype(dtype))
            return layer
        return Network([cast(l) for l in self.layers], self.input_shape, self.class_count,
                       self.split_index, self.name)

    @property
    def has_weights(self) -> bool:
        return all(l.weight is not None for l in self.layers if isinstance(l, (Conv, FullyConnected)))


@dataclass
class ActivationTrace:
    """Input plus every layer's output; ``outputs[i]`` is the output of layer ``i``."""

    x: np.ndarray
    outputs: list

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    def input_of(self, i: int) -> np.ndarray:
        return self.x if i == 0 else self.outputs[i - 1]

    @property
    def label(self) -> int:
        return int(np.argmax(self.logits))


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

def conv_valid(xp: np.ndarray, weight: np.ndarray, bias: np.ndarray, s: int) -> np.ndarray:
    """Unpadded strided convolution (cross-correlation) with a fixed accumulation order."""
    cout, cin, k, _ = weight.shape
    _, h, w = xp.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.empty((cout, ho, wo), dtype=np.result_type(xp, weight))
    out[...] = bias[:, None, None]
    for ci in range(cin):
        for ky in range(k):
            rows = slice(ky, ky + s * (ho - 1) + 1, s)
            for kx in range(k):
                cols = slice(kx, kx + s * (wo - 1) + 1, s)
                out += weight[:, ci, ky, kx, None, None] * xp[ci, rows, cols][None]
    return out


def maxpool_valid(x: np.ndarray, k: int, s: int) -> np.ndarray:
    _, h, w = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = None
    for ky in range(k):
        rows = slice(ky, ky + s * (ho - 1) + 1, s)
        for kx in range(k):
            cols = slice(kx, kx + s * (wo - 1) + 1, s)
            win = x[:, rows, cols]
            out = win.copy() if out is None else np.maximum(out, win)
    return out


def pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def apply_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        if layer.weight is None:
            raise ValueError("conv layer has no weights (geometry-only network)")
        return conv_valid(pad_hw(x, layer.p), layer.weight, layer.bias, layer.s)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if isinstance(layer, MaxPool):
        return maxpool_valid(x, layer.k, layer.s)
    if isinstance(layer, GlobalAvgPool):
        return x.reshape(x.shape[0], -1).mean(axis=1, dtype=x.dtype)
    if isinstance(layer, FullyConnected):
        if layer.weight is None:
            raise ValueError("fc layer has no weights (geometry-only network)")
        return layer.weight @ x.reshape(-1) + layer.bias
    raise TypeError(f"unsupported layer {layer!r}")


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------

def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains NaN or Inf")


def forward(net: Network, x: np.ndarray) -> ActivationTrace:
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    outputs = []
    t = x
    for layer in net.layers:
        t = apply_layer(layer, t)
        outputs.append(t)
    return ActivationTrace(x, outputs)


def forward_range(net: Network, t: np.ndarray, from_layer: int, to_layer: int) -> np.ndarray:
    """Run layers ``from_layer .. to_layer - 1`` on ``t``.

    ``forward_range(net, x, 0, len(net))`` gives the logits; an empty range
    returns ``t`` itself.
    """
    n = len(net.layers)
    if not (0 <= from_layer <= to_layer <= n):
        raise IndexError(f"layer range [{from_layer}, {to_layer}) outside 0..{n}")
    t = np.asarray(t)
    if t.shape != net.in_shape(from_layer):
        raise ShapeError(f"tensor shape {t.shape} != input of layer {from_layer} {net.in_shape(from_layer)}")
    for layer in net.layers[from_layer:to_layer]:
        t = apply_layer(layer, t)
    return t


def predict(net: Network, x: np.ndarray) -> int:
    return int(np.argmax(forward_range(net, x, 0, len(net.layers))))


# --------------------------------------------------------------------------
# Losses and backward
# --------------------------------------------------------------------------

class LossSpec(Protocol):
    """A scalar function of an activation trace.

    ``seed`` returns ``{layer_index: d loss / d output_of_that_layer}``.
    """

    def value(self, trace: ActivationTrace) -> float: ...

    def seed(self, trace: ActivationTrace) -> dict[int, np.ndarray]: ...


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


@dataclass(frozen=True)
class LogitLoss:
    """loss = logits[label]."""

    label: int

    def value(self, trace):
        return float(trace.logits[self.label])

    def seed(self, trace):
        g = np.zeros_like(trace.logits)
        g[self.label] = 1
        return {len(trace.outputs) - 1: g}


@dataclass(frozen=True)
class CrossEntropyLoss:
    """loss = -log softmax(logits)[label]."""

    label: int

    def value(self, trace):
        return float(-log_softmax(trace.logits)[self.label])

    def seed(self, trace):
        p = np.exp(log_softmax(trace.logits))
        p[self.label] -= 1.0
        return {len(trace.outputs) - 1: p.astype(trace.logits.dtype)}


@dataclass(frozen=True)
class ConstantLoss:
    c: float = 0.0

    def value(self, trace):
        return self.c

    def seed(self, trace):
        return {}


def conv_backward_input(g: np.ndarray, weight: np.ndarray, s: int, p: int,
                        in_hw: tuple[int, int]) -> np.ndarray:
    """Gradient w.r.t. the (unpadded) conv input given the output gradient ``g``."""
    cout, cin, k, _ = weight.shape
    h, w = in_hw
    _, ho, wo = g.shape
    gx = np.zeros((cin, h + 2 * p, w + 2 * p), dtype=np.result_type(g, weight))
    for ci in range(cin):
        for ky in range(k):
            rows = slice(ky, ky + s * (ho - 1) + 1, s)
            for kx in range(k):
                cols = slice(kx, kx + s * (wo - 1) + 1, s)
                gx[ci, rows, cols] += np.tensordot(weight[:, ci, ky, kx], g, axes=1)
    return gx[:, p:p + h, p:p + w]


def _maxpool_backward(g, x, k, s):
    c, h, w = x.shape
    _, ho, wo = g.shape
    gx = np.zeros_like(x)
    # Route to the first maximum in (ky, kx) scan order, matching maxpool_valid.
    best = np.full((c, ho, wo), -np.inf, dtype=np.float64)
    arg = np.zeros((c, ho, wo), dtype=np.int64)
    for ky in range(k):
        for kx in range(k):
            win = x[:, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]
            better = win > best
            best = np.where(better, win, best)
            arg = np.where(better, ky * k + kx, arg)
    ci, oy, ox = np.indices((c, ho, wo))
    iy = oy * s + arg // k
    ix = ox * s + arg % k
    np.add.at(gx, (ci, iy, ix), g)
    return gx


def backward_layer(layer: LayerSpec, x: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        return conv_backward_input(g, layer.weight, layer.s, layer.p, x.shape[1:])
    if isinstance(layer, ReLU):
        return g * (x > 0)
    if isinstance(layer, MaxPool):
        return _maxpool_backward(g, x, layer.k, layer.s)
    if isinstance(layer, GlobalAvgPool):
        c, h, w = x.shape
        return np.broadcast_to((g / (h * w))[:, None, None], x.shape).astype(x.dtype)
    if isinstance(layer, FullyConnected):
        return (layer.weight.T @ g).reshape(x.shape)
    raise TypeError(f"no backward rule for {layer!r}")


def backward(net: Network, trace: ActivationTrace, seeds: dict[int, np.ndarray]) -> np.ndarray:
    """Reverse-mode pass from per-layer output gradients down to the input."""
    g = None
    for i in range(len(net.layers) - 1, -1, -1):
        if i in seeds:
            g = seeds[i] if g is None else g + seeds[i]
        if g is None:
            continue
        g = backward_layer(net.layers[i], trace.input_of(i), trace.outputs[i], g)
    if g is None:
        return np.zeros_like(trace.x)
    return g.astype(trace.x.dtype, copy=False)


def grad_wrt_input(net: Network, x: np.ndarray, loss: LossSpec) -> np.ndarray:
    _check_finite(x)
    trace = forward(net, x)
    return backward(net, trace, loss.seed(trace))


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

def random_network(rng: np.random.Generator, input_shape: Sequence[int], specs: Sequence[tuple],
                   class_count: int, dtype=DTYPE, head: str = "gap") -> Network:
    """Build a network with random weights from compact specs.

    ``specs`` entries: ``("conv", out_ch, k, s, p)``, ``("relu",)``, ``("pool", k, s)``.
    The head is ``"gap"`` (GlobalAvgPool + FC) or ``"fc"`` (flatten + FC).
    """
    shape = tuple(input_shape)
    layers = []
    for spec in specs:
        if spec[0] == "conv":
            _, out_ch, k, s, p = spec
            fan_in = shape[0] * k * k
            w = rng.uniform(-1, 1, (out_ch, shape[0], k, k)) * np.sqrt(3.0 / fan_in)
            b = rng.uniform(-0.1, 0.1, out_ch)
            layer = Conv(shape[0], out_ch, k, s, p, w.astype(dtype), b.astype(dtype))
        elif spec[0] == "relu":
            layer = ReLU()
        elif spec[0] == "pool":
            layer = MaxPool(spec[1], spec[2])
        else:
            raise ValueError(f"unknown spec {spec}")
        layers.append(layer)
        shape = layer_output_shape(layer, shape)
    if head == "none":
        n = int(np.prod(shape))
        layers.append(FullyConnected(n, class_count, np.zeros((class_count, n), dtype), np.zeros(class_count, dtype)))
        return Network(layers, tuple(input_shape), class_count)
    if head == "gap":
        layers.append(GlobalAvgPool())
        shape = (shape[0],)
    n = int(np.prod(shape))
    w = rng.uniform(-1, 1, (class_count, n)) * np.sqrt(3.0 / n)
    layers.append(FullyConnected(n, class_count, w.astype(dtype), rng.uniform(-0.1, 0.1, class_count).astype(dtype)))
    return Network(layers, tuple(input_shape), class_count)
