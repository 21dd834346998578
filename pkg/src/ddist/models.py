"""Differentiable classifiers and the losses used by both optimization loops.

Two architectures: a plain MLP (no normalization) and a small ConvNet built
from conv(3x3, stride 1) -> instance norm -> activation -> average-pool(2)
blocks with a linear head.  Everything is expressed in autodiff graph ops so
logits are differentiable w.r.t. parameters and inputs alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, ShapeError

_INSTANCE_NORM_EPS = 1e-8


@dataclass(frozen=True)
class ArchitectureSpec:
    """Static description of a network; parameter shapes follow from it alone.

    `hidden` holds layer widths for mlp and channel counts for convnet (one
    entry per conv block); the `linear` kind is a bias-only logit map with no
    hidden layers (quadratic inner losses for oracle tests).
    `width_multiplier` scales every hidden entry, so evaluation can train
    wider nets without touching the base spec.
    """

    kind: str = "mlp"
    hidden: tuple = (32,)
    input_shape: tuple = (2,)
    classes: int = 3
    normalization: str = "none"
    activation: str = "relu"
    width_multiplier: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.kind not in ("linear", "mlp", "convnet"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "linear":
            if self.hidden:
                raise ConfigError("linear kind takes no hidden layers")
        elif len(self.hidden) < 1:
            raise ConfigError("at least one hidden layer required")
        if self.classes < 2:
            raise ConfigError("class count must be >= 2")
        if self.normalization not in ("none", "instance"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "instance" and self.kind != "convnet":
            raise ConfigError("instance normalization is only valid for convnet")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.width_multiplier < 1:
            raise ConfigError("width_multiplier must be >= 1")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise ConfigError("convnet input shape must be (channels, height, width)")
            _, h, w = self.input_shape
            factor = 2 ** len(self.hidden)
            if h % factor or w % factor or h // factor < 1 or w // factor < 1:
                raise ConfigError(
                    f"spatial dims {h}x{w} not divisible by 2^depth={factor} pooling")

    def widened(self, multiplier: int) -> "ArchitectureSpec":
        return replace(self, width_multiplier=self.width_multiplier * int(multiplier))

    @property
    def widths(self) -> tuple:
        return tuple(h * self.width_multiplier for h in self.hidden)


class ParamVector:
    """Ordered, named parameter tensors for one network."""

    __slots__ = ("names", "values")

    def __init__(self, names, values):
        self.names = tuple(names)
        self.values = list(values)
        if len(self.names) != len(self.values):
            raise ShapeError("ParamVector: names and values length mismatch")

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def items(self):
        return zip(self.names, self.values)

    @property
    def param_count(self) -> int:
        return sum(v.data.size for v in self.values)

    def detached(self, requires_grad=False) -> "ParamVector":
        fresh = []
        for v in self.values:
            node = ad.detach(v)
            node.requires_grad = requires_grad
            fresh.append(node)
        return ParamVector(self.names, fresh)

    def arrays(self):
        return [np.array(v.data, dtype=np.float64) for v in self.values]


def _param_shapes(spec: ArchitectureSpec):
    shapes = []
    widths = spec.widths
    if spec.kind == "linear":
        fan = int(np.prod(spec.input_shape))
        shapes.append(("w_out", (fan, spec.classes), "he"))
        shapes.append(("b_out", (spec.classes,), "zero"))
        return shapes
    if spec.kind == "mlp":
        fan = int(np.prod(spec.input_shape))
        for i, w in enumerate(widths):
            shapes.append((f"w{i}", (fan, w), "he"))
            shapes.append((f"b{i}", (w,), "zero"))
            fan = w
        shapes.append(("w_out", (fan, spec.classes), "he"))
        shapes.append(("b_out", (spec.classes,), "zero"))
        return shapes
    c, h, w = spec.input_shape
    for i, f in enumerate(widths):
        shapes.append((f"conv{i}_w", (f, c, 3, 3), "he"))
        shapes.append((f"conv{i}_b", (f,), "zero"))
        if spec.normalization == "instance":
            shapes.append((f"norm{i}_gamma", (f,), "one"))
            shapes.append((f"norm{i}_beta", (f,), "zero"))
        c = f
        h //= 2
        w //= 2
    shapes.append(("w_out", (c * h * w, spec.classes), "he"))
    shapes.append(("b_out", (spec.classes,), "zero"))
    return shapes


def init_params(spec: ArchitectureSpec, seed: int) -> ParamVector:
    """He-initialized parameters: weights ~ N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    names, values = [], []
    for name, shape, init in _param_shapes(spec):
        if init == "he":
            fan_in = int(np.prod(shape[:-1])) if len(shape) == 2 else int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif init == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        names.append(name)
        values.append(ad.leaf(np.asarray(data, dtype=np.float64)))
    return ParamVector(names, values)


# ---------------------------------------------------------------------------
# convnet building blocks

_IM2COL_CACHE: dict = {}


def _im2col_indices(c, h, w, pad):
    """Flat gather indices for a 3x3, stride-1 convolution.

    Maps into a flattened (c*h*w + 1) source per sample, where the final
    sentinel slot holds the zero used for padding positions.
    """
    key = (c, h, w, pad)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    h_out, w_out = h + 2 * pad - 2, w + 2 * pad - 2
    sentinel = c * h * w
    oi, oj = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    cols = np.empty((h_out * w_out, c * 9), dtype=np.intp)
    k = 0
    for ci in range(c):
        for di in range(3):
            for dj in range(3):
                si = oi + di - pad
                sj = oj + dj - pad
                valid = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
                flat = np.where(valid, ci * h * w + si * w + sj, sentinel)
                cols[:, k] = flat.reshape(-1)
                k += 1
    result = (cols.reshape(-1), h_out, w_out)
    _IM2COL_CACHE[key] = result
    return result


def conv2d(x, weight, bias, pad=1):
    """3x3 stride-1 convolution via im2col gather + matmul."""
    b, c, h, w = x.shape
    f = weight.shape[0]
    idx, h_out, w_out = _im2col_indices(c, h, w, pad)
    flat = ad.reshape(x, (b, c * h * w))
    ext = ad.concat([flat, ad.constant(np.zeros((b, 1)))], axis=1)
    cols = ad.reshape(ad.gather_flat(ext, idx), (b * h_out * w_out, c * 9))
    wmat = ad.transpose(ad.reshape(weight, (f, c * 9)))
    out = ad.add(ad.matmul(cols, wmat), bias)
    out = ad.transpose(ad.reshape(out, (b, h_out * w_out, f)), (0, 2, 1))
    return ad.reshape(out, (b, f, h_out, w_out))


def instance_norm(x, gamma, beta, eps=_INSTANCE_NORM_EPS):
    """Normalize each (sample, channel) plane to mean 0, variance 1, then affine."""
    b, c, h, w = x.shape
    mu = ad.broadcast_to(ad.mean_reduce(x, axis=(2, 3), keepdims=True), x.shape)
    centered = ad.sub(x, mu)
    var = ad.mean_reduce(ad.mul(centered, centered), axis=(2, 3), keepdims=True)
    denom = ad.broadcast_to(ad.sqrt(ad.add(var, eps)), x.shape)
    normed = ad.div(centered, denom)
    g = ad.broadcast_to(ad.reshape(gamma, (c, 1, 1)), x.shape)
    s = ad.broadcast_to(ad.reshape(beta, (c, 1, 1)), x.shape)
    return ad.add(ad.mul(normed, g), s)


def avg_pool2(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: odd spatial dims {h}x{w}")
    return ad.mean_reduce(ad.reshape(x, (b, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


def _activate(x, activation):
    return ad.relu(x) if activation == "relu" else ad.tanh(x)


def forward(spec: ArchitectureSpec, params: ParamVector, inputs):
    """Logits of shape (batch, classes)."""
    x = ad.as_value(inputs)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"forward: input trailing shape {x.shape[1:]} != spec {spec.input_shape}")
    batch = x.shape[0]
    lookup = dict(params.items())
    if spec.kind == "linear":
        flat = ad.reshape(x, (batch, int(np.prod(spec.input_shape))))
        return ad.add(ad.matmul(flat, lookup["w_out"]), lookup["b_out"])
    if spec.kind == "mlp":
        h = ad.reshape(x, (batch, int(np.prod(spec.input_shape))))
        for i in range(len(spec.hidden)):
            h = _activate(ad.add(ad.matmul(h, lookup[f"w{i}"]), lookup[f"b{i}"]),
                          spec.activation)
        return ad.add(ad.matmul(h, lookup["w_out"]), lookup["b_out"])
    h = x
    for i in range(len(spec.hidden)):
        h = conv2d(h, lookup[f"conv{i}_w"], lookup[f"conv{i}_b"])
        if spec.normalization == "instance":
            h = instance_norm(h, lookup[f"norm{i}_gamma"], lookup[f"norm{i}_beta"])
        h = _activate(h, spec.activation)
        h = avg_pool2(h)
    flat = ad.reshape(h, (batch, h.size // batch))
    return ad.add(ad.matmul(flat, lookup["w_out"]), lookup["b_out"])


# ---------------------------------------------------------------------------
# losses and metrics

def soft_cross_entropy(logits, soft_labels):
    """Mean over the batch of -sum_c y_c * log softmax(logits)_c.

    Label weights are used exactly as given (they need not sum to 1), which is
    what makes unnormalized learnable labels work.
    """
    logits = ad.as_value(logits)
    labels = ad.as_value(soft_labels)
    if logits.shape != labels.shape:
        raise ShapeError(
            f"soft_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if np.any(labels.data < 0.0):
        raise DomainError("soft_cross_entropy: negative label entry")
    lsm = ad.log_softmax(logits)
    return ad.scale(ad.sum_reduce(ad.mul(labels, lsm)), -1.0 / logits.shape[0])


def mse_loss(logits, targets):
    """Mean squared error over all entries."""
    logits = ad.as_value(logits)
    targets = ad.as_value(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"mse_loss: logits {logits.shape} vs targets {targets.shape}")
    diff = ad.sub(logits, targets)
    return ad.mean_reduce(ad.mul(diff, diff))


LOSSES = {"soft_ce": soft_cross_entropy, "mse": mse_loss}


def accuracy(logits, hard_labels) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the lowest index."""
    logits = logits.data if isinstance(logits, ad.GraphValue) else np.asarray(logits)
    labels = np.asarray(hard_labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"accuracy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise DomainError(f"accuracy: label outside [0, {logits.shape[-1]})")
    return float(np.mean(np.argmax(logits, axis=-1) == labels))
