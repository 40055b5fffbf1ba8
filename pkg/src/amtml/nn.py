"""Layers, models built from a text descriptor, forward traces and SGD.

Descriptor grammar (comma-separated tokens, colon-separated sizes)::

    dense:IN:OUT        fully connected layer with bias
    conv2d:IN:OUT       3x3 conv, stride 1, pad 1, with bias ("conv" also accepted)
    relu
    flatten             C x H x W -> C*H*W
    gmp                 global max pool, C x H x W -> C ("global_max_pool" also accepted)

The final token must be a dense layer; it is the classification head. All
earlier layers form the body, which is partitioned into contiguous groups
for multi-group hints.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from amtml import tensor as tc
from amtml.errors import ConfigError, DescriptorError, NumericError, ShapeError, StateError
from amtml.tensor import Tensor

_ALIASES = {
    "dense": "dense",
    "linear": "dense",
    "conv": "conv2d",
    "conv2d": "conv2d",
    "relu": "relu",
    "flatten": "flatten",
    "gmp": "global_max_pool",
    "global_max_pool": "global_max_pool",
}
_SIZED = {"dense", "conv2d"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 3

    def token(self):
        if self.kind in _SIZED:
            return f"{self.kind}:{self.in_size}:{self.out_size}"
        return {"global_max_pool": "gmp"}.get(self.kind, self.kind)


def parse_descriptor(text):
    layers = []
    text = text.strip()
    if not text:
        return layers
    for pos, raw in enumerate(text.split(",")):
        tok = raw.strip()
        parts = tok.split(":")
        kind = _ALIASES.get(parts[0].strip().lower())
        if kind is None:
            raise DescriptorError(f"unknown layer token {tok!r} at position {pos}")
        if kind in _SIZED:
            if len(parts) != 3:
                raise DescriptorError(f"token {tok!r} at position {pos} needs two sizes")
            try:
                a, b = int(parts[1]), int(parts[2])
            except ValueError:
                raise DescriptorError(f"non-integer size in token {tok!r} at position {pos}") from None
            if a <= 0 or b <= 0:
                raise DescriptorError(f"sizes must be positive in token {tok!r}")
            layers.append(LayerSpec(kind, a, b))
        else:
            if len(parts) != 1:
                raise DescriptorError(f"token {tok!r} at position {pos} takes no sizes")
            layers.append(LayerSpec(kind))
    return layers


def _out_shape(idx, layer, shape):
    if layer.kind == "dense":
        if len(shape) != 1 or shape[0] != layer.in_size:
            raise ShapeError(f"layer {idx} (dense:{layer.in_size}:{layer.out_size}) cannot take input shape {list(shape)}")
        return (layer.out_size,)
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_size:
            raise ShapeError(f"layer {idx} (conv2d:{layer.in_size}:{layer.out_size}) cannot take input shape {list(shape)}")
        return (layer.out_size, shape[1], shape[2])
    if layer.kind == "relu":
        return shape
    if layer.kind == "flatten":
        return (math.prod(shape),)
    if layer.kind == "global_max_pool":
        if len(shape) != 3:
            raise ShapeError(f"layer {idx} (gmp) needs a C x H x W input, got {list(shape)}")
        return (shape[0],)
    raise DescriptorError(f"unhandled layer kind {layer.kind}")


def split_groups(n_layers, n_groups):
    """Boundaries for ``n_groups`` near-equal contiguous groups (earlier
    groups take the remainder)."""
    if n_groups < 1 or n_groups > n_layers:
        raise ConfigError(f"cannot split {n_layers} body layers into {n_groups} groups")
    base, extra = divmod(n_layers, n_groups)
    bounds, end = [], 0
    for g in range(n_groups):
        end += base + (1 if g < extra else 0)
        bounds.append(end)
    return bounds


class Model:
    """Ordered layers plus named parameters.

    ``group_boundaries`` partitions the body (every layer except the dense
    head); the last boundary equals the number of body layers.
    """

    def __init__(self, layers, params, input_shape, shapes, descriptor=None):
        self.layers = list(layers)
        self.params = params
        self.input_shape = tuple(input_shape)
        self.shapes = list(shapes)
        self.descriptor = descriptor if descriptor is not None else ",".join(l.token() for l in self.layers)
        self.num_classes = self.layers[-1].out_size if self.layers else 0
        self.feature_layer = _pick_feature_layer(self.layers, self.shapes)
        n_body = max(len(self.layers) - 1, 0)
        self.group_boundaries = [n_body] if n_body else []

    @property
    def n_body(self):
        return max(len(self.layers) - 1, 0)

    @property
    def n_groups(self):
        return len(self.group_boundaries)

    def set_groups(self, n_groups):
        self.group_boundaries = split_groups(self.n_body, n_groups)
        return self

    def group_shapes(self):
        return [self.shapes[b - 1] for b in self.group_boundaries]

    @property
    def feature_shape(self):
        if self.feature_layer is None:
            return self.input_shape
        return self.shapes[self.feature_layer]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        tc.zero_grad(self.params.values())

    def __repr__(self):
        return f"Model({self.descriptor!r}, input_shape={list(self.input_shape)}, params={count_params(self)})"


def _pick_feature_layer(layers, shapes):
    body = range(len(layers) - 1)
    spatial = [i for i in body if len(shapes[i]) == 3]
    if spatial:
        return spatial[-1]
    return (len(layers) - 2) if len(layers) > 1 else None


def build_model(arch, input_shape, num_classes=None, seed=0, groups=None):
    layers = parse_descriptor(arch) if isinstance(arch, str) else list(arch)
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        shape = _out_shape(i, layer, shape)
        shapes.append(shape)
    if layers:
        if layers[-1].kind != "dense":
            raise DescriptorError(f"last layer must be a dense head, got {layers[-1].token()!r}")
        if num_classes is not None and layers[-1].out_size != num_classes:
            raise ShapeError(f"layer {len(layers) - 1} emits {layers[-1].out_size} logits, expected {num_classes}")
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        params.update(init_layer_params(i, layer, rng))
    model = Model(layers, params, input_shape, shapes, descriptor=arch if isinstance(arch, str) else None)
    if groups is not None:
        model.set_groups(groups)
    return model


def init_layer_params(i, layer, rng):
    """Glorot-uniform weights and zero biases for layer ``i``."""
    if layer.kind == "dense":
        bound = math.sqrt(6.0 / (layer.in_size + layer.out_size))
        w = rng.uniform(-bound, bound, size=(layer.in_size, layer.out_size))
    elif layer.kind == "conv2d":
        k2 = layer.kernel * layer.kernel
        bound = math.sqrt(6.0 / (layer.in_size * k2 + layer.out_size * k2))
        w = rng.uniform(-bound, bound, size=(layer.out_size, layer.in_size, layer.kernel, layer.kernel))
    else:
        return {}
    return {
        f"{i}.weight": Tensor(w, requires_grad=True),
        f"{i}.bias": Tensor(np.zeros(layer.out_size), requires_grad=True),
    }


@dataclass
class ForwardTrace:
    logits: Tensor
    group_outputs: list
    feature_map: Tensor


def apply_layer(model, i, x):
    layer = model.layers[i]
    if layer.kind == "dense":
        return tc.add_bias(tc.matmul(x, model.params[f"{i}.weight"]), model.params[f"{i}.bias"])
    if layer.kind == "conv2d":
        return tc.conv2d(x, model.params[f"{i}.weight"], model.params[f"{i}.bias"])
    if layer.kind == "relu":
        return tc.relu(x)
    if layer.kind == "flatten":
        return tc.reshape(x, (x.shape[0], math.prod(x.shape[1:])))
    return tc.batch_global_max_pool(x)


def forward(model, batch):
    if not model.layers:
        raise StateError("cannot run forward on an empty model")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch dims {x.dims} do not match model input {list(model.input_shape)}")
    feature = x if model.feature_layer is None else None
    ends = set(model.group_boundaries)
    groups = []
    for i in range(len(model.layers)):
        x = apply_layer(model, i, x)
        if i == model.feature_layer:
            feature = x
        if i + 1 in ends and i < model.n_body:
            groups.append(x)
    return ForwardTrace(logits=x, group_outputs=groups, feature_map=feature)


def apply_head(model, body_output):
    return apply_layer(model, len(model.layers) - 1, body_output)


def predict_logits(model, features, batch_size=512):
    """Inference without building a graph that requires grad."""
    out = []
    saved = [(p, p.requires_grad) for p in model.params.values()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        for s in range(0, len(features), batch_size):
            out.append(forward(model, np.asarray(features[s:s + batch_size], dtype=np.float64)).logits.data)
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def count_params(model):
    return int(sum(p.data.size for p in model.params.values()))


@dataclass
class SgdState:
    base_lr: float = 0.1
    decay_epochs: tuple = (100, 150)
    decay_factor: float = 0.1
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing: {self.decay_epochs}")

    def lr(self, epoch):
        n = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.base_lr * self.decay_factor ** n


def trainable_tensors(model=None, adapter=None, regressors=()):
    out = []
    if model is not None:
        out.extend(model.parameters())
    if adapter is not None and getattr(adapter, "trainable", True):
        out.extend(adapter.parameters())
    for r in regressors or ():
        out.extend(r.parameters())
    return out


def sgd_step(model, adapter, regressors, state, epoch):
    """Momentum SGD on every trainable tensor, then zero the gradients.

    Raises NumericError if an update leaves any parameter non-finite.
    """
    tensors = trainable_tensors(model, adapter, regressors)
    for p in tensors:
        if p.grad is None:
            raise StateError(f"missing gradient on a trainable tensor of dims {p.dims}")
    lr = state.lr(epoch)
    mu = state.momentum
    for p in tensors:
        key = id(p)
        v = state.velocity.get(key)
        v = p.grad.copy() if v is None else mu * v + p.grad
        state.velocity[key] = v
        with np.errstate(over="ignore", invalid="ignore"):
            p.data = p.data - lr * v
        p.grad = None
    for p in tensors:
        if not np.isfinite(p.data).all():
            raise NumericError(f"parameter of dims {p.dims} became non-finite", component="parameters")
    return lr
