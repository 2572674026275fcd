"""Minimal tensor layers and the plaintext SGD trainer.

Tensors are plain numpy arrays holding a single example (no batch axis):
dense inputs are ``(in,)`` vectors, conv inputs are ``(C, H, W)`` maps.
Only dense and conv2d are bilinear; those are the layers whose heavy
products can be shipped to untrusted workers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteLossError, ShapeError
from .serialize import derive_seed

KINDS = ("dense", "conv2d", "relu", "maxpool", "flatten")
DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_size: Optional[int] = None
    stride: int = 1
    padding: int = 0
    pool_size: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and not (self.in_features and self.out_features):
            raise ValueError("dense layer needs positive in_features and out_features")
        if self.kind == "conv2d" and not (self.in_channels and self.out_channels and self.kernel_size):
            raise ValueError("conv2d layer needs in_channels, out_channels and kernel_size")
        if self.stride < 1 or self.padding < 0 or self.pool_size < 1:
            raise ValueError("stride and pool_size must be >= 1, padding >= 0")

    @classmethod
    def dense(cls, in_features, out_features):
        return cls("dense", in_features=in_features, out_features=out_features)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel_size, stride=1, padding=0):
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_size=kernel_size, stride=stride, padding=padding)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def maxpool(cls, pool_size=2):
        return cls("maxpool", pool_size=pool_size)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "in" in d:
            d["in_features"] = d.pop("in")
        if "out" in d:
            d["out_features"] = d.pop("out")
        return cls(**d)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @property
    def bilinear(self) -> bool:
        return self.kind in ("dense", "conv2d")

    @property
    def weight_shape(self):
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            k = self.kernel_size
            return (self.out_channels, self.in_channels, k, k)
        return None

    @property
    def bias_shape(self):
        if self.kind == "dense":
            return (self.out_features,)
        if self.kind == "conv2d":
            return (self.out_channels,)
        return None

    def output_shape(self, input_shape):
        shape = tuple(int(s) for s in input_shape)
        if self.kind == "dense":
            if shape != (self.in_features,):
                raise ShapeError(f"dense expects ({self.in_features},), got {shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
            k, s, p = self.kernel_size, self.stride, self.padding
            ho = (shape[1] + 2 * p - k) // s + 1
            wo = (shape[2] + 2 * p - k) // s + 1
            if ho < 1 or wo < 1:
                raise ShapeError(f"kernel {k} does not fit input {shape} with padding {p}")
            return (self.out_channels, ho, wo)
        if self.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"maxpool expects (C, H, W), got {shape}")
            k = self.pool_size
            if shape[1] < k or shape[2] < k:
                raise ShapeError(f"pool window {k} larger than input {shape}")
            return (shape[0], shape[1] // k, shape[2] // k)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape


def shape_trace(layers, input_shape):
    """Shapes flowing through ``layers``: ``[input_shape, out_0, out_1, ...]``."""
    shapes = [tuple(input_shape)]
    for layer in layers:
        shapes.append(layer.output_shape(shapes[-1]))
    return shapes


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


def _conv_windows(layer, x):
    """Strided (C, Ho, Wo, k, k) view over the zero-padded input."""
    p, k, s = layer.padding, layer.kernel_size, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    return win[:, ::s, ::s]


def linear_forward(layer: LayerSpec, W, x):
    """The bilinear product <W, x>: ``W @ x`` for dense, cross-correlation for conv2d."""
    _check(layer.bilinear, f"{layer.kind} is not a bilinear layer")
    _check(W.shape == layer.weight_shape, f"weight shape {W.shape} != {layer.weight_shape}")
    out_shape = layer.output_shape(x.shape)
    if layer.kind == "dense":
        return W @ x
    win = _conv_windows(layer, x)
    y = np.tensordot(W, win, axes=([1, 2, 3], [0, 3, 4]))
    assert y.shape == out_shape
    return y


def weight_grad(layer: LayerSpec, delta, x):
    """<delta, x>: gradient of the layer output w.r.t. W contracted with ``delta``."""
    _check(layer.bilinear, f"{layer.kind} is not a bilinear layer")
    out_shape = layer.output_shape(x.shape)
    _check(delta.shape == out_shape, f"delta shape {delta.shape} != output shape {out_shape}")
    if layer.kind == "dense":
        return np.outer(delta, x)
    win = _conv_windows(layer, x)
    return np.tensordot(delta, win, axes=([1, 2], [1, 2]))


def input_grad(layer: LayerSpec, W, delta, input_shape=None):
    """Gradient w.r.t. the layer input given ``delta`` at its output.

    For conv2d the input spatial size is ambiguous under striding, so
    ``input_shape`` may be passed; otherwise the smallest consistent size is used.
    """
    _check(layer.bilinear, f"{layer.kind} is not a bilinear layer")
    _check(W.shape == layer.weight_shape, f"weight shape {W.shape} != {layer.weight_shape}")
    if layer.kind == "dense":
        _check(delta.shape == (layer.out_features,), f"delta shape {delta.shape} != ({layer.out_features},)")
        return W.T @ delta
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    _check(delta.ndim == 3 and delta.shape[0] == layer.out_channels,
           f"delta shape {delta.shape} incompatible with {layer.out_channels} output channels")
    ho, wo = delta.shape[1:]
    if input_shape is None:
        input_shape = (layer.in_channels, (ho - 1) * s + k - 2 * p, (wo - 1) * s + k - 2 * p)
    _check(layer.output_shape(input_shape) == delta.shape,
           f"input shape {tuple(input_shape)} does not produce delta shape {delta.shape}")
    c, h, w = input_shape
    dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.result_type(W, delta))
    cols = np.tensordot(W, delta, axes=([0], [0]))  # (C, k, k, Ho, Wo)
    for u in range(k):
        for v in range(k):
            dxp[:, u:u + s * ho:s, v:v + s * wo:s] += cols[:, u, v]
    return dxp[:, p:p + h, p:p + w]


def nonlinear_forward(layer: LayerSpec, x):
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind == "flatten":
        return x.reshape(-1)
    if layer.kind == "maxpool":
        c, ho, wo = layer.output_shape(x.shape)
        k = layer.pool_size
        blocks = x[:, :ho * k, :wo * k].reshape(c, ho, k, wo, k)
        return blocks.max(axis=(2, 4))
    raise ShapeError(f"{layer.kind} is not a coordinator-side layer")


def nonlinear_backward(layer: LayerSpec, x, delta):
    """Route ``delta`` back through the nonlinearity evaluated at input ``x``.

    Maxpool sends each window's gradient to its first (row-major) maximum.
    """
    if layer.kind == "relu":
        _check(delta.shape == x.shape, f"delta shape {delta.shape} != input shape {x.shape}")
        return np.where(x > 0, delta, 0).astype(delta.dtype, copy=False)
    if layer.kind == "flatten":
        _check(delta.size == x.size, f"delta size {delta.size} != input size {x.size}")
        return delta.reshape(x.shape)
    if layer.kind == "maxpool":
        c, ho, wo = layer.output_shape(x.shape)
        _check(delta.shape == (c, ho, wo), f"delta shape {delta.shape} != {(c, ho, wo)}")
        k = layer.pool_size
        blocks = x[:, :ho * k, :wo * k].reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4)
        arg = blocks.reshape(c, ho, wo, k * k).argmax(axis=-1)
        out = np.zeros_like(x, dtype=delta.dtype)
        ci, pi, qi = np.indices((c, ho, wo))
        out[ci, pi * k + arg // k, qi * k + arg % k] = delta
        return out
    raise ShapeError(f"{layer.kind} is not a coordinator-side layer")


def softmax_cross_entropy(logits, label):
    """Loss and d(loss)/d(logits) for one example, log-sum-exp stabilized."""
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    loss = float(lse - z[label])
    grad = np.exp(z - lse)
    grad[label] -= 1
    return loss, grad


# --------------------------------------------------------------------------
# model plumbing shared by the plaintext and protocol trainers


@dataclass
class Model:
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        self.shapes = shape_trace(self.layers, self.input_shape)

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_shape"], d["layers"])

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @property
    def n_outputs(self):
        return int(np.prod(self.shapes[-1]))

    def init_params(self, seed, dtype=np.float64):
        """He-normal weights and zero biases for each bilinear layer (None elsewhere)."""
        rng = np.random.default_rng(seed)
        params = []
        for layer in self.layers:
            if not layer.bilinear:
                params.append(None)
                continue
            fan_in = int(np.prod(layer.weight_shape[1:]))
            W = rng.standard_normal(layer.weight_shape) * np.sqrt(2.0 / fan_in)
            params.append({"W": W.astype(dtype), "b": np.zeros(layer.bias_shape, dtype=dtype)})
        return params

    def first_param_layer(self):
        return next(i for i, l in enumerate(self.layers) if l.bilinear)


def add_bias(layer, y, b):
    if layer.kind == "dense":
        return y + b
    return y + b[:, None, None]


def bias_grad(layer, delta):
    if layer.kind == "dense":
        return delta
    return delta.sum(axis=(1, 2))


def predict(model: Model, params, x):
    """Plaintext logits for one example."""
    h = x
    for layer, p in zip(model.layers, params):
        if layer.bilinear:
            h = add_bias(layer, linear_forward(layer, p["W"], h), p["b"])
        else:
            h = nonlinear_forward(layer, h)
    return h


def flat_params(params):
    parts = [np.concatenate([p["W"].ravel(), p["b"].ravel()]) for p in params if p is not None]
    return np.concatenate(parts) if parts else np.zeros(0)


def copy_params(params):
    return [None if p is None else {k: v.copy() for k, v in p.items()} for p in params]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 8
    epochs: int = 1
    steps: Optional[int] = None
    precision: str = "f64"
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 1 or (self.steps is not None and self.steps < 0):
            raise ValueError("epochs must be >= 1 and steps >= 0")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self):
        return asdict(self)


# sub-seed keys; the protocol trainer uses the same ones so both runs see
# identical initial weights and data order
SEED_INIT, SEED_SHUFFLE, SEED_PROTOCOL = 1, 2, 3


def batch_schedule(n, cfg: TrainConfig):
    """Yield ``(epoch, index_array)`` per SGD step, reshuffling once per epoch."""
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, SEED_SHUFFLE, epoch)).permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            if cfg.steps is not None and step >= cfg.steps:
                return
            yield epoch, order[start:start + cfg.batch_size]
            step += 1


def accuracy(model, params, X, y):
    if len(X) == 0:
        return None
    preds = np.array([int(np.argmax(predict(model, params, x))) for x in X])
    return float((preds == y).mean())


@dataclass
class TrainResult:
    params: list
    trajectory: list = field(default_factory=list)   # (step, flat params) per logged step
    losses: list = field(default_factory=list)       # mean batch loss per step
    metrics: list = field(default_factory=list)      # one dict per epoch
    integrity_failures: int = 0


def _epoch_metrics(model, params, epoch, losses, dataset, failures, t0, record_wall_time):
    return {
        "epoch": epoch,
        "loss": float(np.mean(losses)) if losses else float("nan"),
        "train_acc": accuracy(model, params, dataset.X, dataset.y),
        "val_acc": accuracy(model, params, dataset.X_val, dataset.y_val),
        "integrity_failures": failures,
        "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if record_wall_time else None,
    }


def sgd_update(W, grad_sum, eta, count):
    """W - eta * (1/count) * grad_sum."""
    return W - eta * (grad_sum / count)


def train_plaintext(model: Model, cfg: TrainConfig, dataset, record_wall_time=False) -> TrainResult:
    """Plain minibatch SGD on softmax cross-entropy; the reference the protocol must match."""
    dtype = cfg.dtype
    params = model.init_params(derive_seed(cfg.seed, SEED_INIT), dtype)
    X = dataset.X.astype(dtype, copy=False)
    result = TrainResult(params=params)
    epoch_losses, cur_epoch, t0 = [], 0, time.perf_counter()
    step = 0
    for epoch, idx in batch_schedule(len(X), cfg):
        if epoch != cur_epoch:
            result.metrics.append(_epoch_metrics(model, params, cur_epoch, epoch_losses, dataset, 0, t0,
                                                 record_wall_time))
            epoch_losses, cur_epoch, t0 = [], epoch, time.perf_counter()
        grads = [None if p is None else {"W": np.zeros_like(p["W"]), "b": np.zeros_like(p["b"])}
                 for p in params]
        batch_loss = 0.0
        for i in idx:
            acts = [X[i]]
            for layer, p in zip(model.layers, params):
                h = acts[-1]
                if layer.bilinear:
                    acts.append(add_bias(layer, linear_forward(layer, p["W"], h), p["b"]))
                else:
                    acts.append(nonlinear_forward(layer, h))
            loss, delta = softmax_cross_entropy(acts[-1], int(dataset.y[i]))
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at step {step}, example {int(i)}")
            batch_loss += loss
            delta = delta.astype(dtype, copy=False)
            for l in range(len(model.layers) - 1, -1, -1):
                layer, p = model.layers[l], params[l]
                if layer.bilinear:
                    grads[l]["W"] += weight_grad(layer, delta, acts[l])
                    grads[l]["b"] += bias_grad(layer, delta)
                    if l > model.first_param_layer():
                        delta = input_grad(layer, p["W"], delta, acts[l].shape)
                elif l > model.first_param_layer():
                    delta = nonlinear_backward(layer, acts[l], delta)
        for p, g in zip(params, grads):
            if p is not None:
                p["W"] = sgd_update(p["W"], g["W"], cfg.learning_rate, len(idx))
                p["b"] = sgd_update(p["b"], g["b"], cfg.learning_rate, len(idx))
        step += 1
        result.losses.append(batch_loss / len(idx))
        epoch_losses.append(batch_loss / len(idx))
        if step % cfg.log_every == 0:
            result.trajectory.append((step, flat_params(params)))
    result.metrics.append(_epoch_metrics(model, params, cur_epoch, epoch_losses, dataset, 0, t0,
                                         record_wall_time))
    result.params = params
    return result
