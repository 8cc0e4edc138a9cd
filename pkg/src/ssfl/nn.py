"""Flat-vector multilayer perceptron.

All parameters of the network live in one float64 vector of length ``d``; a
:class:`LayerLayout` records which slice belongs to which weight matrix or
bias.  Keeping the parameters flat makes masking, saliency and federated
averaging plain vector operations.

Weight matrices are stored row-major with shape ``(fan_in, fan_out)`` so a
layer computes ``x @ W + b``.  Hidden layers use ReLU; the last layer emits
raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from ssfl.seeding import substream


@dataclass(frozen=True)
class LayerSlice:
    name: str
    offset: int
    length: int
    fan_in: int
    fan_out: int
    kind: str  # "weight" or "bias"

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class LayerLayout:
    layers: tuple[LayerSlice, ...]
    total_params: int

    def __post_init__(self):
        pos = 0
        for layer in self.layers:
            if layer.offset != pos:
                raise ValueError(f"layer {layer.name} starts at {layer.offset}, expected {pos}")
            if layer.kind == "weight":
                expected = layer.fan_in * layer.fan_out
            elif layer.kind == "bias":
                expected = layer.fan_out
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if layer.length != expected:
                raise ValueError(f"layer {layer.name} has length {layer.length}, expected {expected}")
            pos += layer.length
        if pos != self.total_params:
            raise ValueError(f"layers cover {pos} params but total_params={self.total_params}")

    @property
    def d(self) -> int:
        return self.total_params

    @cached_property
    def sizes(self) -> list[int]:
        weights = [l for l in self.layers if l.kind == "weight"]
        return [weights[0].fan_in] + [w.fan_out for w in weights]

    def describe(self) -> list[list]:
        return [[l.name, l.offset, l.length, l.fan_in, l.fan_out, l.kind] for l in self.layers]

    @cached_property
    def _pairs(self):
        it = iter(self.layers)
        return [(w.offset, w.stop, (w.fan_in, w.fan_out), b.offset, b.stop) for w, b in zip(it, it)]

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per dense layer; writes go through to ``params``."""
        return [(params[w0:w1].reshape(shape), params[b0:b1]) for w0, w1, shape, b0, b1 in self._pairs]


def mlp_layout(sizes: Sequence[int]) -> LayerLayout:
    """Layout for an MLP with layer widths ``sizes = [F, h1, ..., N]``."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes!r}")
    layers = []
    offset = 0
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        fan_in, fan_out = int(fan_in), int(fan_out)
        layers.append(LayerSlice(f"fc{i + 1}.weight", offset, fan_in * fan_out, fan_in, fan_out, "weight"))
        offset += fan_in * fan_out
        layers.append(LayerSlice(f"fc{i + 1}.bias", offset, fan_out, fan_in, fan_out, "bias"))
        offset += fan_out
    return LayerLayout(tuple(layers), offset)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.labels) < 1:
            raise ValueError("batch needs B >= 1 rows with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)


def init_kaiming(layout: LayerLayout, seed: int) -> np.ndarray:
    """He-normal weights (variance ``2 / fan_in``), zero biases."""
    rng = substream(seed, "init")
    params = np.zeros(layout.total_params)
    for layer in layout.layers:
        if layer.kind == "weight":
            params[layer.slice] = rng.normal(0.0, np.sqrt(2.0 / layer.fan_in), size=layer.length)
    return params


def _effective(params: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return params
    if mask.shape != params.shape:
        raise ValueError(f"mask length {mask.shape} does not match params {params.shape}")
    return params * mask


def _check(params: np.ndarray, layout: LayerLayout, x: np.ndarray) -> None:
    if params.shape != (layout.total_params,):
        raise ValueError(f"params shape {params.shape} does not match layout d={layout.total_params}")
    if x.ndim != 2 or x.shape[1] != layout.sizes[0]:
        raise ValueError(f"features shape {x.shape} does not match input width {layout.sizes[0]}")


def _activations(params, layout, x):
    acts = [x]
    h = x
    layers = layout.unpack(params)
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def forward(params: np.ndarray, layout: LayerLayout, batch, mask: np.ndarray | None = None) -> np.ndarray:
    """Logits of shape ``(B, N)`` for the effective model ``params * mask``.

    ``batch`` may be a :class:`Batch` or a bare feature matrix.
    """
    x = np.asarray(getattr(batch, "features", batch), dtype=np.float64)
    _check(params, layout, x)
    return _activations(_effective(params, mask), layout, x)[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ValueError("logits and labels disagree on batch size")
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(params: np.ndarray, layout: LayerLayout, batch: Batch, mask: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the mean cross-entropy of ``forward`` w.r.t. ``params``.

    With a mask, this is the gradient of ``L(params * mask)``, so masked-out
    entries are exactly zero.
    """
    x = batch.features
    _check(params, layout, x)
    eff = _effective(params, mask)
    acts = _activations(eff, layout, x)
    logits = acts[-1]
    n = len(batch.labels)

    probs = np.exp(log_softmax(logits))
    probs[np.arange(n), batch.labels] -= 1.0
    delta = probs / n

    grad = np.zeros_like(params)
    layers = layout.unpack(eff)
    grad_layers = layout.unpack(grad)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = grad_layers[i]
        gW[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (acts[i] > 0)
    if mask is not None:
        grad *= mask
    return grad


def backward_stacked(params: np.ndarray, layout: LayerLayout, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """:func:`backward` for ``C`` independent models at once.

    ``params`` is ``(C, d)``, ``features`` is ``(C, B, F)`` and ``labels`` is
    ``(C, B)``; row ``c`` of the result is the gradient of model ``c`` on
    batch ``c``.  No mask handling: callers zero masked entries themselves.
    """
    C, n = labels.shape
    Ws = [(params[:, w0:w1].reshape(C, *shape), params[:, b0:b1]) for w0, w1, shape, b0, b1 in layout._pairs]
    acts = [features]
    h = features
    for i, (W, b) in enumerate(Ws):
        z = np.matmul(h, W) + b[:, None, :]
        h = np.maximum(z, 0.0) if i < len(Ws) - 1 else z
        acts.append(h)
    logits = acts[-1]
    shifted = logits - logits.max(axis=2, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=2, keepdims=True)
    np.put_along_axis(probs, labels[:, :, None], np.take_along_axis(probs, labels[:, :, None], 2) - 1.0, 2)
    delta = probs / n

    grad = np.empty_like(params)
    for i in range(len(Ws) - 1, -1, -1):
        w0, w1, _, b0, b1 = layout._pairs[i]
        grad[:, w0:w1] = np.matmul(acts[i].transpose(0, 2, 1), delta).reshape(C, -1)
        grad[:, b0:b1] = delta.sum(axis=1)
        if i > 0:
            delta = np.matmul(delta, Ws[i][0].transpose(0, 2, 1)) * (acts[i] > 0)
    return grad


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """One SGD step with L2 weight decay; masked coordinates are left untouched."""
    if lr < 0 or weight_decay < 0:
        raise ValueError("lr and weight_decay must be nonnegative")
    update = lr * (grad + weight_decay * params)
    if mask is None:
        return params - update
    return np.where(mask, params - update, params)


def lr_at_round(r: int, lr0: float = 0.1, decay: float = 0.998) -> float:
    if r < 0:
        raise ValueError("round index must be >= 0")
    return lr0 * decay**r


def accuracy(params: np.ndarray, layout: LayerLayout, features: np.ndarray, labels: np.ndarray,
             mask: np.ndarray | None = None) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = forward(params, layout, features, mask).argmax(axis=1)
    return float((pred == labels).mean())
