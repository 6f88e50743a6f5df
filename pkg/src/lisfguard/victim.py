"""Desk-scale victim classifier and a small batched trainer for it.

The single-image kernels in ``tensor_net`` fix their accumulation order so
that region recomputation is bit-exact; they are too slow to train with.
Training here uses batched im2col matrix products in float64, then the
weights are handed back as an ordinary float32 ``Network``.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from importlib import resources

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_net import Conv, FullyConnected, GlobalAvgPool, MaxPool, Network, ReLU

log = logging.getLogger(__name__)


def edge_filter_bank(gain: float = 2.0) -> np.ndarray:
    """Twelve 3x3 signed Sobel filters over three colour-opponent channels.

    Channels: luminance, red-green, yellow-blue; orientations: x and y; both
    signs, so that after the ReLU every edge polarity has its own map.
    """
    sobel = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], np.float32) / 4
    mix = np.array([[1 / 3, 1 / 3, 1 / 3], [1, -1, 0], [0.5, 0.5, -1]], np.float32)
    out = []
    for m in mix:
        for k in (sobel, sobel.T):
            for sign in (1, -1):
                out.append(sign * m[:, None, None] * k[None])
    return np.array(out, np.float32) * gain


def victim_architecture(rng: np.random.Generator, size: int = 48, classes: int = 4) -> Network:
    """Fixed edge-filter stem, three conv/pool stages, global max pool, linear head."""

    def he(co, ci, k):
        return (rng.uniform(-1, 1, (co, ci, k, k)) * np.sqrt(3 / (ci * k * k))).astype(np.float32)

    if size % 8:
        raise ValueError("victim input side must be a multiple of 8")
    z = lambda n: np.zeros(n, np.float32)
    layers = [
        Conv(3, 12, 3, 1, 1, edge_filter_bank(), z(12)), ReLU(), MaxPool(2, 2),
        Conv(12, 16, 3, 1, 1, he(16, 12, 3), z(16)), ReLU(), MaxPool(2, 2),
        Conv(16, 24, 3, 1, 1, he(24, 16, 3), z(24)), ReLU(), MaxPool(2, 2),
        Conv(24, 24, 3, 1, 1, he(24, 24, 3), z(24)), ReLU(),
        MaxPool(size // 8, size // 8),
        FullyConnected(24, classes, (rng.uniform(-1, 1, (classes, 24)) * np.sqrt(3 / 24)).astype(np.float32),
                       z(classes)),
    ]
    return Network(layers, (3, size, size), classes, name="victim")


# --------------------------------------------------------------------------
# Batched trainer
# --------------------------------------------------------------------------

def _conv_fwd(x, w, b, s, p):
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    k = w.shape[2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), (cols, xp.shape, ho, wo)


def _conv_bwd(g, w, cache, s, p):
    cols, xshape, ho, wo = cache
    n, co, k, c = g.shape[0], w.shape[0], w.shape[2], w.shape[1]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(0)
    dcols = (g2 @ w.reshape(co, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(xshape)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s] += \
                dcols[..., ky, kx].transpose(0, 3, 1, 2)
    h, wd = xshape[2] - 2 * p, xshape[3] - 2 * p
    return dxp[:, :, p:p + h, p:p + wd], dw, db


def _batched_forward(net: Network, x, params):
    caches = []
    t = x
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            t, c = _conv_fwd(t, *params[i], layer.s, layer.p)
            caches.append(c)
        elif isinstance(layer, ReLU):
            caches.append(t > 0)
            t = np.maximum(t, 0)
        elif isinstance(layer, MaxPool):
            n, c, h, w = t.shape
            k = layer.k
            if layer.s != k or h % k or w % k:
                raise NotImplementedError("trainer supports non-overlapping pools that tile the map")
            r = t.reshape(n, c, h // k, k, w // k, k)
            o = r.max(axis=(3, 5))
            caches.append((t.shape, r == o[:, :, :, None, :, None]))
            t = o
        elif isinstance(layer, GlobalAvgPool):
            caches.append(t.shape)
            t = t.mean(axis=(2, 3))
        elif isinstance(layer, FullyConnected):
            flat = t.reshape(t.shape[0], -1)
            caches.append((t.shape, flat))
            t = flat @ params[i][0].T + params[i][1]
    return t, caches


def _batched_backward(net: Network, g, caches, params):
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer, c = net.layers[i], caches[i]
        if isinstance(layer, Conv):
            g, dw, db = _conv_bwd(g, params[i][0], c, layer.s, layer.p)
            grads[i] = (dw, db)
        elif isinstance(layer, ReLU):
            g = g * c
        elif isinstance(layer, MaxPool):
            shape, hit = c
            share = hit / hit.sum(axis=(3, 5), keepdims=True)
            g = (share * g[:, :, :, None, :, None]).reshape(shape)
        elif isinstance(layer, GlobalAvgPool):
            g = np.broadcast_to(g[:, :, None, None] / (c[2] * c[3]), c)
        elif isinstance(layer, FullyConnected):
            shape, flat = c
            grads[i] = (g.T @ flat, g.sum(0))
            g = (g @ params[i][0]).reshape(shape)
    return grads


def train_network(net: Network, images, labels, epochs: int = 4, batch_size: int = 32, lr: float = 3e-3,
                  seed: int = 0, freeze=()) -> Network:
    """Adam on softmax cross-entropy.  Layers listed in ``freeze`` keep their weights."""
    rng = np.random.default_rng(seed)
    images = np.asarray(images, np.float64)
    labels = np.asarray(labels)
    params = {i: [l.weight.astype(np.float64), l.bias.astype(np.float64)]
              for i, l in enumerate(net.layers) if isinstance(l, (Conv, FullyConnected))}
    m1 = {i: [np.zeros_like(a) for a in v] for i, v in params.items()}
    m2 = {i: [np.zeros_like(a) for a in v] for i, v in params.items()}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        loss = hits = 0.0
        for start in range(0, len(images), batch_size):
            idx = order[start:start + batch_size]
            z, caches = _batched_forward(net, images[idx], params)
            z = z - z.max(1, keepdims=True)
            prob = np.exp(z)
            prob /= prob.sum(1, keepdims=True)
            y = labels[idx]
            rows = np.arange(len(idx))
            loss += -np.log(prob[rows, y]).sum()
            hits += (prob.argmax(1) == y).sum()
            prob[rows, y] -= 1
            grads = _batched_backward(net, prob / len(idx), caches, params)
            step += 1
            for i in params:
                if i in freeze:
                    continue
                for j in range(2):
                    g = grads[i][j]
                    m1[i][j] = 0.9 * m1[i][j] + 0.1 * g
                    m2[i][j] = 0.999 * m2[i][j] + 0.001 * g * g
                    params[i][j] -= lr * (m1[i][j] / (1 - 0.9 ** step)) / (
                        np.sqrt(m2[i][j] / (1 - 0.999 ** step)) + 1e-8)
        log.info("epoch %d loss %.4f acc %.3f", epoch, loss / len(images), hits / len(images))
    layers = list(net.layers)
    for i, (w, b) in params.items():
        layers[i] = replace(layers[i], weight=w.astype(np.float32), bias=b.astype(np.float32))
    return Network(layers, net.input_shape, net.class_count, net.split_index, net.name)


def fit_victim(seed: int = 0, n_train: int = 1200, epochs: int = 4, size: int = 48) -> Network:
    """Train the victim from scratch on rendered scenes (the stem stays fixed)."""
    from .scenario import make_dataset

    rng = np.random.default_rng(seed)
    net = victim_architecture(rng, size)
    data = make_dataset(np.random.default_rng(seed + 1), n_train, size)
    return train_network(net, data.images, data.labels, epochs=epochs, seed=seed, freeze=(0,))


def default_victim() -> Network:
    """The shipped victim weights (``fit_victim(seed=0)`` saved with ``io.save_network``)."""
    from .io import load_network

    with resources.as_file(resources.files("lisfguard") / "data" / "victim.json") as path:
        return load_network(path)
