"""Small classifiers with per-example gradients: linear, MLP and a tiny conv net.

Parameters live in one flat float64 vector. The layout follows declaration
order, depth-first, so per-example gradient rows and the noise vector line
up coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from dpsgd.errors import ConfigurationError, NumericError, ShapeError
from dpsgd.nn import layers

ARCHITECTURES = ("linear", "mlp", "tinyconv")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_shape: Tuple[int, ...]
    num_classes: int
    hidden: Tuple[int, ...] = ()
    channels: Tuple[int, int] = (16, 32)
    group_count: int = 8
    use_weight_standardization: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.architecture == "mlp" and not self.hidden:
            raise ConfigurationError("mlp needs at least one hidden layer")
        if self.architecture != "mlp" and self.hidden:
            raise ConfigurationError("hidden sizes apply to the mlp architecture only")
        if self.architecture == "tinyconv":
            if len(self.input_shape) != 3:
                raise ConfigurationError("tinyconv expects input_shape (channels, height, width)")
            if len(self.channels) != 2:
                raise ConfigurationError("tinyconv expects two conv channel counts")
            for c in self.channels:
                if self.group_count < 1 or c % self.group_count:
                    raise ConfigurationError(
                        f"group_count {self.group_count} does not divide channel count {c}"
                    )

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "hidden", "channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def layout(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """(name, shape) of every parameter tensor, in flattening order."""
    k = spec.num_classes
    if spec.architecture == "linear":
        return [("linear.weight", (k, spec.input_dim)), ("linear.bias", (k,))]
    if spec.architecture == "mlp":
        entries = []
        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden):
            entries += [(f"hidden{i}.weight", (width, fan_in)), (f"hidden{i}.bias", (width,))]
            fan_in = width
        return entries + [("out.weight", (k, fan_in)), ("out.bias", (k,))]
    c_in = spec.input_shape[0]
    c1, c2 = spec.channels
    return [
        ("conv1.weight", (c1, c_in, 3, 3)),
        ("gn1.scale", (c1,)),
        ("gn1.shift", (c1,)),
        ("conv2.weight", (c2, c1, 3, 3)),
        ("gn2.scale", (c2,)),
        ("gn2.shift", (c2,)),
        ("head.weight", (k, c2)),
        ("head.bias", (k,)),
    ]


def param_count(spec: ModelSpec) -> int:
    return sum(math.prod(shape) for _, shape in layout(spec))


@dataclass(frozen=True)
class ModelParams:
    spec: ModelSpec
    vector: np.ndarray
    slices: Dict[str, Tuple[slice, Tuple[int, ...]]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        table, offset = {}, 0
        for name, shape in layout(self.spec):
            size = math.prod(shape)
            table[name] = (slice(offset, offset + size), shape)
            offset += size
        if v.shape != (offset,):
            raise ShapeError(f"parameter vector has shape {v.shape}, layout needs ({offset},)")
        if not np.all(np.isfinite(v)):
            raise NumericError("parameters contain non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        object.__setattr__(self, "slices", table)

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self.slices[name]
        return self.vector[sl].reshape(shape)

    def replace(self, vector) -> "ModelParams":
        return ModelParams(self.spec, vector)

    @property
    def size(self) -> int:
        return self.vector.size


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Gaussian weights with variance 1/fan-in; biases and shifts 0, scales 1."""
    parts = []
    for name, shape in layout(spec):
        if name.endswith(".weight"):
            fan_in = math.prod(shape[1:])
            parts.append(rng.standard_normal(shape).ravel() / math.sqrt(fan_in))
        elif name.endswith(".scale"):
            parts.append(np.ones(math.prod(shape)))
        else:
            parts.append(np.zeros(math.prod(shape)))
    return ModelParams(spec, np.concatenate(parts))


def zero_params(spec: ModelSpec) -> ModelParams:
    return ModelParams(spec, np.zeros(param_count(spec)))


def _check_inputs(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        if spec.architecture != "tinyconv" and x.ndim == 2 and x.shape[1] == spec.input_dim:
            return x
        raise ShapeError(f"input batch of shape {x.shape} does not match input_shape {spec.input_shape}")
    return x


def _weight(params: ModelParams, name: str, standardize: bool) -> np.ndarray:
    w = params[name]
    if standardize:
        return layers.weight_standardize(w, math.prod(w.shape[1:]))
    return w


def _dense_stack(params: ModelParams, x: np.ndarray, want_grads: bool, dlogits_fn):
    spec = params.spec
    ws = spec.use_weight_standardization
    if spec.architecture == "mlp":
        names = [f"hidden{i}" for i in range(len(spec.hidden))] + ["out"]
    else:
        names = ["linear"]
    a = x.reshape(x.shape[0], -1)
    acts, pre = [a], []
    for j, name in enumerate(names):
        hidden = j < len(names) - 1
        w = _weight(params, f"{name}.weight", ws and hidden)
        z = a @ w.T + params[f"{name}.bias"]
        if hidden:
            pre.append(z)
            a = np.maximum(z, 0.0)
            acts.append(a)
        else:
            logits = z
    if not want_grads:
        return logits, None
    delta = dlogits_fn(logits)
    grads = {}
    for j in reversed(range(len(names))):
        name = names[j]
        hidden = j < len(names) - 1
        grad_w = np.einsum("no,ni->noi", delta, acts[j])
        raw = params[f"{name}.weight"]
        if ws and hidden:
            grad_w = layers.weight_standardize_backward(raw, grad_w)
        grads[f"{name}.weight"] = grad_w
        grads[f"{name}.bias"] = delta
        if j:
            w = _weight(params, f"{name}.weight", ws and hidden)
            delta = (delta @ w) * (pre[j - 1] > 0)
    return logits, grads


def _tinyconv(params: ModelParams, x: np.ndarray, want_grads: bool, dlogits_fn):
    spec = params.spec
    ws = spec.use_weight_standardization
    g = spec.group_count
    w1 = _weight(params, "conv1.weight", ws)
    w2 = _weight(params, "conv2.weight", ws)
    z1, cols1 = layers.conv3x3_forward(x, w1)
    n1, cache1 = layers._group_norm(z1, g, params["gn1.scale"], params["gn1.shift"], layers.GN_EPSILON)
    a1 = np.maximum(n1, 0.0)
    z2, cols2 = layers.conv3x3_forward(a1, w2)
    n2, cache2 = layers._group_norm(z2, g, params["gn2.scale"], params["gn2.shift"], layers.GN_EPSILON)
    a2 = np.maximum(n2, 0.0)
    pooled = a2.mean(axis=(2, 3))
    logits = pooled @ params["head.weight"].T + params["head.bias"]
    if not want_grads:
        return logits, None

    delta = dlogits_fn(logits)
    grads = {"head.weight": np.einsum("nk,nc->nkc", delta, pooled), "head.bias": delta}
    hw = a2.shape[2] * a2.shape[3]
    d_a2 = np.broadcast_to((delta @ params["head.weight"])[:, :, None, None] / hw, a2.shape)
    d_z2, grads["gn2.scale"], grads["gn2.shift"] = layers.group_norm_backward(
        d_a2 * (n2 > 0), cache2, g, params["gn2.scale"]
    )
    d_a1, d_w2 = layers.conv3x3_backward(d_z2, cols2, w2, a1.shape)
    d_z1, grads["gn1.scale"], grads["gn1.shift"] = layers.group_norm_backward(
        d_a1 * (n1 > 0), cache1, g, params["gn1.scale"]
    )
    n, c_out = d_z1.shape[:2]
    d_w1 = np.einsum("npo,npk->nok", d_z1.reshape(n, c_out, -1).transpose(0, 2, 1), cols1)
    d_w1 = d_w1.reshape(n, *w1.shape)
    if ws:
        d_w1 = layers.weight_standardize_backward(params["conv1.weight"], d_w1)
        d_w2 = layers.weight_standardize_backward(params["conv2.weight"], d_w2)
    grads["conv1.weight"], grads["conv2.weight"] = d_w1, d_w2
    return logits, grads


def _run(params: ModelParams, x, want_grads: bool = False, dlogits_fn=None):
    x = _check_inputs(params.spec, x)
    if params.spec.architecture == "tinyconv":
        return _tinyconv(params, x, want_grads, dlogits_fn)
    return _dense_stack(params, x, want_grads, dlogits_fn)


def forward(params: ModelParams, x) -> np.ndarray:
    """Logits of shape (n, num_classes)."""
    return _run(params, x)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"labels of shape {y.shape} do not match batch size {n}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ShapeError("labels out of range")
    return y.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    log_probs = _log_softmax(logits)
    return -log_probs[np.arange(len(logits)), labels]


def loss(params: ModelParams, x, labels) -> np.ndarray:
    """Per-example softmax cross-entropy."""
    logits = forward(params, x)
    return cross_entropy(logits, _check_labels(labels, len(logits), params.spec.num_classes))


def loss_and_per_example_grads(params: ModelParams, x, labels) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example losses (n,) and gradients (n, P) in layout order."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ShapeError("empty batch")
    y = _check_labels(labels, len(x), params.spec.num_classes)
    out = {}

    def dlogits(logits):
        log_probs = _log_softmax(logits)
        out["loss"] = -log_probs[np.arange(len(y)), y]
        d = np.exp(log_probs)
        d[np.arange(len(y)), y] -= 1.0
        return d

    _, grads = _run(params, x, True, dlogits)
    rows = np.concatenate([grads[name].reshape(len(x), -1) for name, _ in layout(params.spec)], axis=1)
    return out["loss"], rows


def per_example_grads(params: ModelParams, x, labels) -> np.ndarray:
    """Row i is the gradient of example i's cross-entropy w.r.t. the flat parameters."""
    return loss_and_per_example_grads(params, x, labels)[1]


def accuracy(params: ModelParams, x, labels, batch_size: Optional[int] = 4096) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    step = batch_size or len(labels)
    correct = 0
    for start in range(0, len(labels), step):
        pred = forward(params, x[start : start + step]).argmax(axis=1)
        correct += int((pred == labels[start : start + step]).sum())
    return correct / len(labels)
