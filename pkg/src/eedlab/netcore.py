"""Small dense/conv network engine with exact reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A model is an
ordered list of layers followed by an implicit softmax. Prunable layers
(dense, conv2d) carry a binary mask congruent to their weight; the effective
weight used everywhere is ``weight * mask``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

BN_EPS = 1e-5
DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an input does not fit the layer it is fed to."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass or loss produces inf/nan."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"
    prunable = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.mask: np.ndarray | None = None

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout, cache):
        """Return ``(dx, grads)`` where grads are keyed by param name."""
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def effective_weight(self):
        w = self.params["weight"]
        return w * self.mask


class Dense(Layer):
    kind = "dense"
    prunable = True

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params = {
            "weight": np.zeros((self.out_features, self.in_features), DTYPE),
            "bias": np.zeros(self.out_features, DTYPE),
        }
        self.mask = np.ones_like(self.params["weight"])

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(
                f"dense expects input dims ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expects (batch, {self.in_features}), got {x.shape}")
        w = self.effective_weight()
        return x @ w.T + self.params["bias"], x

    def backward(self, dout, cache):
        x = cache
        w = self.effective_weight()
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ w, grads

    def config(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2d(Layer):
    """Stride-1 zero-padded 2-D convolution (cross-correlation)."""

    kind = "conv2d"
    prunable = True

    def __init__(self, in_channels, out_channels, kernel=3, padding=None):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.padding = self.kernel // 2 if padding is None else int(padding)
        k = self.kernel
        self.params = {
            "weight": np.zeros((self.out_channels, self.in_channels, k, k), DTYPE),
            "bias": np.zeros(self.out_channels, DTYPE),
        }
        self.mask = np.ones_like(self.params["weight"])

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(
                f"conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} too large for {tuple(in_shape)}")
        return (self.out_channels, ho, wo)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d expects (batch, {self.in_channels}, H, W), got {x.shape}")
        p, k = self.padding, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        out = np.einsum("bchwij,ocij->bohw", win, self.effective_weight(), optimize=True)
        return out + self.params["bias"][None, :, None, None], (x.shape, win)

    def backward(self, dout, cache):
        x_shape, win = cache
        p, k = self.padding, self.kernel
        w = self.effective_weight()
        grads = {
            "weight": np.einsum("bohw,bchwij->ocij", dout, win, optimize=True),
            "bias": dout.sum(axis=(0, 2, 3)),
        }
        dpad = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        dwin = np.lib.stride_tricks.sliding_window_view(dpad, (k, k), axis=(2, 3))
        dxp = np.einsum("bohwij,ocij->bchw", dwin, w[:, :, ::-1, ::-1], optimize=True)
        h, wd = x_shape[2], x_shape[3]
        return dxp[:, :, p:p + h, p:p + wd], grads

    def config(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "padding": self.padding}


class BatchNorm(Layer):
    """Per-channel batch normalisation over dense features or conv channels."""

    kind = "batchnorm"

    def __init__(self, channels):
        super().__init__()
        self.channels = int(channels)
        self.params = {
            "gamma": np.ones(self.channels, DTYPE),
            "beta": np.zeros(self.channels, DTYPE),
        }
        self.buffers = {
            "running_mean": np.zeros(self.channels, DTYPE),
            "running_var": np.ones(self.channels, DTYPE),
        }

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got {tuple(in_shape)}")
        return in_shape

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def std(self):
        """Inference-mode per-channel scale denominator sqrt(var + eps)."""
        return np.sqrt(self.buffers["running_var"] + BN_EPS)

    def forward(self, x, training=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got {x.shape}")
        axes = self._axes(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        out = self._bcast(self.params["gamma"], x) * xhat + self._bcast(self.params["beta"], x)
        return out, (training, xhat, inv, mean, var)

    def backward(self, dout, cache):
        training, xhat, inv, _, _ = cache
        axes = self._axes(dout)
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self._bcast(self.params["gamma"], dout)
        if not training:
            return dxhat * self._bcast(inv, dout), grads
        m = dout.size // self.channels
        sum_d = self._bcast(dxhat.sum(axis=axes), dout)
        sum_dx = self._bcast((dxhat * xhat).sum(axis=axes), dout)
        dx = self._bcast(inv, dout) / m * (m * dxhat - sum_d - xhat * sum_dx)
        return dx, grads

    def config(self):
        return {"kind": self.kind, "channels": self.channels}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dout, cache):
        return dout * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    layers: list
    num_classes: int
    rng_seed: int
    input_shape: tuple

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def prunable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", arr

    def named_masks(self):
        for i, layer in enumerate(self.layers):
            if layer.mask is not None:
                yield f"{i}.weight", layer.mask

    def n_prunable(self) -> int:
        return sum(self.layers[i].mask.size for i in self.prunable_indices())

    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "layers": [layer.config() for layer in self.layers]}

    def equals(self, other: "Model") -> bool:
        """Bit-exact comparison of architecture, parameters, buffers and masks."""
        if self.architecture() != other.architecture() or self.rng_seed != other.rng_seed:
            return False
        for a, b in zip(self.layers, other.layers):
            for d1, d2 in ((a.params, b.params), (a.buffers, b.buffers)):
                for k in d1:
                    if d1[k].tobytes() != d2[k].tobytes():
                        return False
            if (a.mask is None) != (b.mask is None):
                return False
            if a.mask is not None and a.mask.tobytes() != b.mask.tobytes():
                return False
        return True


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"batch has {self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


def _build_layer(cfg: dict, in_shape):
    kind = cfg["kind"]
    if kind == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer needs flat input, got {tuple(in_shape)}; add a flatten")
        return Dense(in_shape[0], cfg["out"])
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs (C, H, W) input, got {tuple(in_shape)}")
        return Conv2d(in_shape[0], cfg["out"], cfg.get("kernel", 3), cfg.get("padding"))
    if kind == "batchnorm":
        return BatchNorm(in_shape[0])
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


def build_model(arch: dict, seed: int = 0) -> Model:
    """Build an all-zero model from an architecture description.

    ``arch`` has ``input_shape``, ``num_classes`` and a ``layers`` list of dicts
    such as ``{"kind": "dense", "out": 16}``. Dims are checked to compose.
    """
    shape = tuple(int(s) for s in arch["input_shape"])
    input_shape = shape
    layers = []
    for i, cfg in enumerate(arch["layers"]):
        try:
            layer = _build_layer(cfg, shape)
            shape = layer.out_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({cfg.get('kind')}): {exc}") from None
        layers.append(layer)
    num_classes = int(arch["num_classes"])
    if shape != (num_classes,):
        raise ShapeError(f"final output dims {shape} do not match num_classes={num_classes}")
    return Model(layers, num_classes, int(seed), input_shape)


def init_model(arch: dict, seed: int) -> Model:
    """Build a model and draw weights from a fan-in scaled uniform.

    Weights and biases of dense/conv layers are drawn from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)); batchnorm starts at identity. All masks are ones.
    """
    model = build_model(arch, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for layer in model.layers:
        if layer.prunable:
            w = layer.params["weight"]
            fan_in = int(np.prod(w.shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            layer.params["weight"] = rng.uniform(-bound, bound, size=w.shape)
            layer.params["bias"] = rng.uniform(-bound, bound, size=layer.params["bias"].shape)
    return model


def mlp_arch(input_dim, hidden, num_classes, batchnorm=True) -> dict:
    """Architecture dict for a dense ReLU network, optionally with batchnorm."""
    layers = []
    for h in hidden:
        layers.append({"kind": "dense", "out": int(h)})
        if batchnorm:
            layers.append({"kind": "batchnorm"})
        layers.append({"kind": "relu"})
    layers.append({"kind": "dense", "out": int(num_classes)})
    return {"input_shape": [int(input_dim)], "num_classes": int(num_classes), "layers": layers}


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Trace:
    """Everything a forward pass keeps for the backward pass."""

    inputs: np.ndarray
    outputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    training: bool = False

    @property
    def logits(self):
        return self.outputs[-1]

    @property
    def probs(self):
        return softmax(self.outputs[-1])


def forward_trace(model: Model, inputs, training=False) -> Trace:
    x = np.asarray(inputs, dtype=DTYPE)
    expect = tuple(model.input_shape)
    if x.shape[1:] != expect:
        raise ShapeError(f"model expects inputs of shape (batch, {', '.join(map(str, expect))}),"
                         f" got {x.shape}")
    trace = Trace(inputs=x, training=training)
    for layer in model.layers:
        x, cache = layer.forward(x, training)
        trace.outputs.append(x)
        trace.caches.append(cache)
    return trace


def forward(model: Model, inputs, training=False):
    """Class probabilities, shape (batch, num_classes)."""
    return forward_trace(model, inputs, training).probs


def _first_nonfinite_layer(trace: Trace):
    for i, out in enumerate(trace.outputs):
        if not np.all(np.isfinite(out)):
            return i
    return None


def backprop(model: Model, trace: Trace, grad_logits, extra=None, mask_grads=True):
    """Reverse pass from a gradient on the logits.

    ``extra`` optionally maps a layer index to an additional gradient on that
    layer's output (used by activation penalties). Returns ``(grads, dx)``
    with grads keyed ``"<layer>.<param>"``. Masked-out weight entries get an
    exactly-zero gradient unless ``mask_grads`` is False.
    """
    extra = extra or {}
    grads = {}
    dout = np.asarray(grad_logits, dtype=DTYPE)
    for i in range(len(model.layers) - 1, -1, -1):
        if i in extra:
            dout = dout + extra[i]
        layer = model.layers[i]
        dout, g = layer.backward(dout, trace.caches[i])
        for name, val in g.items():
            if name == "weight" and mask_grads:
                val = val * layer.mask
            grads[f"{i}.{name}"] = val
    return grads, dout


def cross_entropy(probs, labels, reduce=True):
    p = probs[np.arange(labels.shape[0]), labels]
    losses = -np.log(np.maximum(p, 1e-300))
    return losses.mean() if reduce else losses


def ce_grad_logits(probs, labels):
    """Gradient of mean cross-entropy w.r.t. logits."""
    g = probs.copy()
    g[np.arange(labels.shape[0]), labels] -= 1.0
    return g / labels.shape[0]


def softmax_backward(probs, grad_probs):
    """Map dL/dprobs to dL/dlogits through the softmax Jacobian."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


LOSS_KINDS = ("ce",)


def backward(model: Model, batch: Batch, loss_kind="ce", training=False, mask_grads=True):
    """Loss value and gradients for every parameter plus the input.

    Returns ``(grads, loss)``; ``grads["input"]`` holds dL/dx.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    trace = forward_trace(model, batch.inputs, training)
    probs = trace.probs
    loss = cross_entropy(probs, batch.labels)
    if not np.isfinite(loss):
        layer = _first_nonfinite_layer(trace)
        raise NonFiniteError(f"non-finite loss (first non-finite output at layer {layer})",
                             layer=layer)
    grads, dx = backprop(model, trace, ce_grad_logits(probs, batch.labels),
                         mask_grads=mask_grads)
    grads["input"] = dx
    return grads, float(loss)


def update_running_stats(model: Model, trace: Trace, momentum=0.1):
    """Fold the batch statistics of a training-mode trace into running buffers."""
    if not trace.training:
        return
    for layer, cache in zip(model.layers, trace.caches):
        if isinstance(layer, BatchNorm):
            _, _, _, mean, var = cache
            rm, rv = layer.buffers["running_mean"], layer.buffers["running_var"]
            layer.buffers["running_mean"] = (1 - momentum) * rm + momentum * mean
            layer.buffers["running_var"] = (1 - momentum) * rv + momentum * var


def sgd_step(model: Model, gradients: dict, learning_rate: float) -> Model:
    """Return a new model with ``p - lr * g`` applied where the mask is 1."""
    if learning_rate < 0:
        raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
    new = model.copy()
    if learning_rate == 0:
        return new
    for i, layer in enumerate(new.layers):
        for name in layer.params:
            key = f"{i}.{name}"
            if key not in gradients:
                continue
            g = gradients[key]
            if g.shape != layer.params[name].shape:
                raise ShapeError(f"gradient {key} has shape {g.shape}, "
                                 f"parameter has {layer.params[name].shape}")
            step = learning_rate * g
            if name == "weight" and layer.mask is not None:
                step = step * layer.mask
            layer.params[name] = layer.params[name] - step
    return new


class SGD:
    """Plain SGD with optional heavy-ball momentum; masks are respected."""

    def __init__(self, momentum=0.0, weight_decay=0.0):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: Model, gradients: dict, lr: float) -> Model:
        if self.momentum == 0.0 and self.weight_decay == 0.0:
            return sgd_step(model, gradients, lr)
        eff = {}
        for key, p in model.named_params():
            if key not in gradients:
                continue
            g = gradients[key]
            if self.weight_decay and key.endswith("weight"):
                g = g + self.weight_decay * p
            v = self.momentum * self.velocity.get(key, 0.0) + g
            self.velocity[key] = v
            eff[key] = v
        return sgd_step(model, eff, lr)


def clear_masks(model: Model) -> Model:
    """Copy of the model with every mask reset to ones (stored weights exposed)."""
    new = model.copy()
    for layer in new.layers:
        if layer.mask is not None:
            layer.mask = np.ones_like(layer.mask)
    return new


def apply_masks(model: Model, masks: dict) -> Model:
    """Copy of the model with masks replaced; keys are prunable layer indices."""
    new = model.copy()
    for i, m in masks.items():
        layer = new.layers[i]
        if m.shape != layer.mask.shape:
            raise ShapeError(f"mask for layer {i} has shape {m.shape}, expected {layer.mask.shape}")
        layer.mask = np.asarray(m, dtype=DTYPE).copy()
    return new


def predict(model: Model, inputs, batch_size=1024):
    outs = [forward(model, inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def flatten_params(model: Model) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, arr in model.named_params()])


def param_count_summary(model: Model) -> dict[str, Any]:
    idx = model.prunable_indices()
    kept = sum(int(model.layers[i].mask.sum()) for i in idx)
    return {"prunable": model.n_prunable(), "kept": kept}
