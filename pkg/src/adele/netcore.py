"""A small fully convolutional segmentation network with hand-written gradients.

Architecture: a stack of same-padded ``k x k`` convolutions with ReLU,
followed by a ``1 x 1`` convolution to ``K`` logits and a per-pixel softmax.
Convolutions are evaluated as a sum of shifted matrix products, which is the
fastest pure-numpy formulation for the small channel counts used here, except
on thin inputs where one unrolled product is cheaper.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .consistency import DEFAULT_SCALES, multiscale_forward, softmax


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class ModelSpec:
    in_channels: int = 3
    num_classes: int = 4
    # [kernel size, output channels] or [kernel size, output channels, dilation]
    # for each hidden conv + ReLU layer
    hidden: list = field(default_factory=lambda: [[3, 16], [3, 16]])
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for layer in self.hidden:
            if len(layer) not in (2, 3):
                raise ValueError("hidden layers are [kernel, channels] or [kernel, channels, dilation]")
            k, c = layer[:2]
            if k % 2 != 1 or c < 1 or (len(layer) == 3 and layer[2] < 1):
                raise ValueError("hidden layers need odd kernels, >= 1 channel and dilation >= 1")

    def layer_shapes(self) -> list:
        shapes, cin = [], self.in_channels
        for k, cout, *_ in self.hidden:
            shapes.append((k, k, cin, cout))
            cin = cout
        shapes.append((1, 1, cin, self.num_classes))
        return shapes

    def dilations(self) -> list:
        return [layer[2] if len(layer) == 3 else 1 for layer in self.hidden] + [1]

    def receptive_radius(self) -> int:
        return sum(d * (layer[0] // 2) for layer, d in zip(self.hidden, self.dilations()))


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 60

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


class ModelParams:
    """Flat parameter vector plus the layout of each layer's weights and bias."""

    def __init__(self, spec: ModelSpec, vector: np.ndarray | None = None):
        self.spec = spec
        self.layout = []
        offset = 0
        for shape in spec.layer_shapes():
            nw = int(np.prod(shape))
            self.layout.append((offset, shape, offset + nw, shape[-1]))
            offset += nw + shape[-1]
        self.size = offset
        if vector is None:
            vector = np.zeros(offset, dtype=spec.dtype)
        if vector.shape != (offset,):
            raise ValueError(f"parameter vector must have length {offset}")
        self.vector = vector

    def layers(self, vector: np.ndarray | None = None):
        v = self.vector if vector is None else vector
        return [(v[w0:w0 + int(np.prod(shape))].reshape(shape), v[b0:b0 + nb])
                for w0, shape, b0, nb in self.layout]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.vector.copy())


def init_params(spec: ModelSpec) -> ModelParams:
    """He-style fan-in initialisation, zero biases."""
    params = ModelParams(spec)
    rng = np.random.default_rng(spec.seed)
    for W, _ in params.layers():
        fan_in = W.shape[0] * W.shape[1] * W.shape[2]
        W[...] = rng.standard_normal(W.shape) * np.sqrt(2.0 / fan_in)
    return params


# Inputs with at most this many channels are unrolled (im2col) instead of
# shifted: the shifted products would have an inner dimension too small for BLAS.
_UNROLL_MAX_CHANNELS = 4


def _conv(x: np.ndarray, W: np.ndarray, b: np.ndarray, dil: int = 1):
    """Same-padded (optionally dilated) convolution.

    Returns the output and what :func:`_conv_backward` needs.
    """
    k = W.shape[0]
    n, h, w, cin = x.shape
    if k == 1:
        return x @ W[0, 0] + b, x
    p = dil * (k // 2)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    if cin <= _UNROLL_MAX_CHANNELS:
        # rows ordered (channel, dy, dx) to match the window view
        span = 2 * p + 1
        win = sliding_window_view(xp, (span, span), axis=(1, 2))[..., ::dil, ::dil]
        cols = win.reshape(-1, cin * k * k)
        out = cols @ W.transpose(2, 0, 1, 3).reshape(-1, W.shape[3]) + b
        return out.reshape(n, h, w, -1), cols
    out = np.empty((n, h, w, W.shape[3]), dtype=x.dtype)
    out[...] = b
    for i in range(k):
        for j in range(k):
            out += xp[:, i * dil:i * dil + h, j * dil:j * dil + w, :] @ W[i, j]
    return out, xp


def _conv_backward(dout: np.ndarray, saved: np.ndarray, W: np.ndarray, need_dx: bool = True,
                   dil: int = 1):
    k = W.shape[0]
    n, h, w, cout = dout.shape
    flat = dout.reshape(-1, cout)
    db = flat.sum(axis=0)
    if k == 1:
        dW = (saved.reshape(-1, saved.shape[-1]).T @ flat)[None, None]
        return (dout @ W[0, 0].T if need_dx else None), dW, db
    p = dil * (k // 2)
    cin = W.shape[2]
    hp, wp = h + 2 * p, w + 2 * p
    # dout embedded top-left in a zero canvas of the padded size: in the
    # flattened canvas every kernel tap becomes a contiguous row offset
    canvas = np.zeros((n, hp, wp, cout), dtype=dout.dtype)
    canvas[:, :h, :w] = dout
    dflat = canvas.reshape(-1, cout)
    span = len(dflat) - (k - 1) * dil * (wp + 1)
    offsets = [(i, j, (i * wp + j) * dil) for i in range(k) for j in range(k)]
    if saved.ndim == 2:
        dW = (saved.T @ flat).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
    else:
        xflat = saved.reshape(-1, cin)
        dW = np.empty_like(W)
        for i, j, off in offsets:
            dW[i, j] = xflat[off:off + span].T @ dflat[:span]
    if not need_dx:
        return None, dW, db
    dx = np.zeros((n * hp * wp, cin), dtype=dout.dtype)
    for i, j, off in offsets:
        dx[off:off + span] += dflat[:span] @ W[i, j].T
    return dx.reshape(n, hp, wp, cin)[:, p:p + h, p:p + w, :], dW, db


def forward(params: ModelParams, x: np.ndarray, keep: bool = False):
    """Logits and class probabilities for a batch ``(N, H, W, C)`` or one grid.

    With ``keep=True`` the intermediates needed by :func:`backward` are
    returned as a third element.
    """
    single = x.ndim == 3
    h = (x[None] if single else x).astype(params.vector.dtype, copy=False)
    if h.shape[-1] != params.spec.in_channels:
        raise ValueError(f"expected {params.spec.in_channels} input channels, got {h.shape[-1]}")
    cache = []
    layers = params.layers()
    dils = params.spec.dilations()
    for idx, (W, b) in enumerate(layers):
        z, xin = _conv(h, W, b, dils[idx])
        last = idx == len(layers) - 1
        cache.append((xin, z if not last else None))
        h = z if last else np.maximum(z, 0)
    logits = h
    probs = softmax(logits)
    if single:
        logits, probs = logits[0], probs[0]
    if keep:
        return logits, probs, cache
    return logits, probs


def backward(params: ModelParams, cache, dlogits: np.ndarray) -> np.ndarray:
    """Parameter gradient (flat, same layout as ``params.vector``)."""
    grad = np.zeros_like(params.vector)
    g = dlogits if dlogits.ndim == 4 else dlogits[None]
    g = g.astype(params.vector.dtype, copy=False)
    layers = params.layers()
    views = params.layers(grad)
    dils = params.spec.dilations()
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        xin, z = cache[idx]
        if z is not None:
            g = g * (z > 0)
        g, dW, db = _conv_backward(g, xin, W, need_dx=idx > 0, dil=dils[idx])
        views[idx][0][...] = dW
        views[idx][1][...] = db
    return grad


def cross_entropy(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-12):
    """Mean pixel cross-entropy and its gradient w.r.t. ``probs``."""
    n = labels.size
    picked = np.maximum(np.take_along_axis(probs, labels[..., None], axis=-1), eps)
    loss = float(-np.log(picked).sum() / n)
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, labels[..., None], (-1.0 / n) / picked, axis=-1)
    return loss, grad


def cross_entropy_logits(logits: np.ndarray, labels: np.ndarray):
    """Mean pixel cross-entropy of ``softmax(logits)`` and its logit gradient."""
    p = softmax(logits)
    n = labels.size
    onehot = np.eye(p.shape[-1], dtype=p.dtype)[labels]
    loss = float(-np.log(np.maximum((p * onehot).sum(axis=-1), 1e-300)).sum() / n)
    return loss, (p - onehot) / n


def sgd_step(vector: np.ndarray, grad: np.ndarray, velocity: np.ndarray, cfg: OptimConfig):
    """Heavy-ball SGD with L2 weight decay; returns ``(vector, velocity)``."""
    if vector.shape != grad.shape or vector.shape != velocity.shape:
        raise ValueError("parameter, gradient and velocity shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient encountered; aborting")
    g = grad + cfg.weight_decay * vector if cfg.weight_decay else grad
    velocity = cfg.momentum * velocity + g
    return vector - cfg.lr * velocity, velocity


def model_fn(params: ModelParams):
    return lambda batch: forward(params, batch)[1]


def predict_dataset(params: ModelParams, images: np.ndarray,
                    scales: Sequence[float] = DEFAULT_SCALES, batch_size: int = 16) -> np.ndarray:
    """Multiscale-averaged probabilities ``q`` for every image, no augmentation."""
    fn = model_fn(params)
    out = []
    for i in range(0, len(images), batch_size):
        _, q = multiscale_forward(fn, images[i:i + batch_size], scales)
        out.append(q)
    if not out:
        return np.zeros((0,) + images.shape[1:3] + (params.spec.num_classes,),
                        dtype=params.vector.dtype)
    return np.concatenate(out)
