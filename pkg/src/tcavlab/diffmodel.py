"""Small sequential classifier with hand-written backpropagation.

The model is a list of named layers. Any layer name is a valid cut point:
``forward_to_layer`` gives the activation after that layer and
``layer_to_logits`` runs the remaining tail. ``grad_logit_wrt_activation``
differentiates one logit of the tail with respect to the cut activation.

Parameters are stored as float32 so that checkpoints round-trip exactly;
all arithmetic is carried out in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Unknown layer, shape mismatch or bad class index."""


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: Optional[int] = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or min(px.shape) < 1:
            raise ValueError(f"pixels must be a non-empty H x W x C grid, got shape {px.shape}")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self) -> tuple:
        return self.pixels.shape


@dataclass
class LayerActivation:
    layer_name: str
    values: np.ndarray
    original_shape: tuple

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.original_shape = tuple(int(d) for d in self.original_shape)
        if int(np.prod(self.original_shape)) != self.values.size:
            raise ValueError(
                f"original_shape {self.original_shape} does not match {self.values.size} values"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite activation values at layer {self.layer_name!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 20
    epochs: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


# --------------------------------------------------------------------------
# layers
#
# Every layer works on a batch: x has shape (N, *input_shape). ``backward``
# receives the forward input and dL/dy and returns dL/dx plus a dict of
# parameter gradients (same keys as ``params``).


class Layer:
    kind: str = ""
    tag: int = 0

    def __init__(self, name: str, input_shape: Sequence[int]):
        self.name = name
        self.input_shape = tuple(int(d) for d in input_shape)
        self.params: dict[str, np.ndarray] = {}

    @property
    def output_shape(self) -> tuple:
        return self.input_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad_y: np.ndarray) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def shape_dims(self) -> tuple:
        """Integers persisted in checkpoints to rebuild the layer."""
        return self.input_shape

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, {self.input_shape} -> {self.output_shape})"


class Identity(Layer):
    kind = "identity"
    tag = 0

    def forward(self, x):
        return x

    def backward(self, x, grad_y):
        return grad_y, {}


class ReLU(Layer):
    kind = "relu"
    tag = 1

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, grad_y):
        return grad_y * (x > 0.0), {}


class Flatten(Layer):
    kind = "flatten"
    tag = 2

    @property
    def output_shape(self):
        return (int(np.prod(self.input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, grad_y):
        return grad_y.reshape(x.shape), {}


class Dense(Layer):
    """Affine map y = W x + b with W of shape (out, in)."""

    kind = "dense"
    tag = 3

    def __init__(self, name, input_shape, out_features: int, weight=None, bias=None):
        super().__init__(name, input_shape)
        if len(self.input_shape) != 1:
            raise ModelError(f"dense layer {name!r} needs a flat input, got {self.input_shape}")
        n_in = self.input_shape[0]
        self.out_features = int(out_features)
        w = np.zeros((self.out_features, n_in)) if weight is None else weight
        b = np.zeros(self.out_features) if bias is None else bias
        self.params = {
            "weight": np.asarray(w, dtype=np.float32).reshape(self.out_features, n_in),
            "bias": np.asarray(b, dtype=np.float32).reshape(self.out_features),
        }

    @property
    def output_shape(self):
        return (self.out_features,)

    def forward(self, x):
        w = self.params["weight"].astype(np.float64)
        return x @ w.T + self.params["bias"].astype(np.float64)

    def backward(self, x, grad_y):
        w = self.params["weight"].astype(np.float64)
        grads = {"weight": grad_y.T @ x, "bias": grad_y.sum(axis=0)}
        return grad_y @ w, grads

    def shape_dims(self):
        return (self.input_shape[0], self.out_features)


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution over H x W x C inputs.

    Kernel layout is (K, K, C_in, C_out).
    """

    kind = "conv2d"
    tag = 4

    def __init__(self, name, input_shape, filters: int, kernel_size: int = 3, kernel=None, bias=None):
        super().__init__(name, input_shape)
        if len(self.input_shape) != 3:
            raise ModelError(f"conv layer {name!r} needs H x W x C input, got {self.input_shape}")
        h, w, c = self.input_shape
        k = int(kernel_size)
        if k > h or k > w:
            raise ModelError(f"kernel {k} larger than input {self.input_shape} in {name!r}")
        self.filters = int(filters)
        self.kernel_size = k
        kern = np.zeros((k, k, c, self.filters)) if kernel is None else kernel
        b = np.zeros(self.filters) if bias is None else bias
        self.params = {
            "kernel": np.asarray(kern, dtype=np.float32).reshape(k, k, c, self.filters),
            "bias": np.asarray(b, dtype=np.float32).reshape(self.filters),
        }

    @property
    def output_shape(self):
        h, w, _ = self.input_shape
        k = self.kernel_size
        return (h - k + 1, w - k + 1, self.filters)

    def _patches(self, x):
        # (N, H', W', C, K, K) -> (N, H', W', K, K, C)
        win = np.lib.stride_tricks.sliding_window_view(x, (self.kernel_size, self.kernel_size), axis=(1, 2))
        return win.transpose(0, 1, 2, 4, 5, 3)

    def forward(self, x):
        kern = self.params["kernel"].astype(np.float64)
        return np.tensordot(self._patches(x), kern, axes=([3, 4, 5], [0, 1, 2])) + self.params[
            "bias"
        ].astype(np.float64)

    def backward(self, x, grad_y):
        kern = self.params["kernel"].astype(np.float64)
        k = self.kernel_size
        patches = self._patches(x)
        grads = {
            "kernel": np.tensordot(patches, grad_y, axes=([0, 1, 2], [0, 1, 2])),
            "bias": grad_y.sum(axis=(0, 1, 2)),
        }
        # full correlation of grad_y with the flipped kernel
        n, ho, wo, _ = grad_y.shape
        padded = np.zeros((n, ho + 2 * (k - 1), wo + 2 * (k - 1), self.filters))
        padded[:, k - 1 : k - 1 + ho, k - 1 : k - 1 + wo, :] = grad_y
        win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
        flipped = kern[::-1, ::-1, :, :]
        # win: (N, H, W, C_out, K, K); flipped: (K, K, C_in, C_out)
        grad_x = np.tensordot(win, flipped, axes=([4, 5, 3], [0, 1, 3]))
        return grad_x, grads

    def shape_dims(self):
        return (*self.input_shape, self.filters, self.kernel_size)


LAYER_KINDS = {cls.tag: cls for cls in (Identity, ReLU, Flatten, Dense, Conv2D)}


def build_layer(tag: int, name: str, dims: Sequence[int]) -> Layer:
    """Inverse of ``Layer.shape_dims``; parameters are left at zero."""
    dims = tuple(int(d) for d in dims)
    if tag not in LAYER_KINDS:
        raise ModelError(f"unknown layer kind tag {tag}")
    cls = LAYER_KINDS[tag]
    if cls is Dense:
        return Dense(name, (dims[0],), dims[1])
    if cls is Conv2D:
        return Conv2D(name, dims[:3], filters=dims[3], kernel_size=dims[4])
    return cls(name, dims)


# --------------------------------------------------------------------------
# model


@dataclass
class LayeredModel:
    layers: list
    class_count: int
    _index: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ModelError("model needs at least one layer")
        if self.class_count < 1:
            raise ModelError("class_count must be positive")
        self._index = {}
        for i, layer in enumerate(self.layers):
            if layer.name in self._index:
                raise ModelError(f"duplicate layer name {layer.name!r}")
            self._index[layer.name] = i
            if i > 0 and self.layers[i - 1].output_shape != layer.input_shape:
                raise ModelError(
                    f"layer {layer.name!r} expects input {layer.input_shape}, "
                    f"previous layer gives {self.layers[i - 1].output_shape}"
                )
        if self.layers[-1].output_shape != (self.class_count,):
            raise ModelError(
                f"final layer outputs {self.layers[-1].output_shape}, expected ({self.class_count},)"
            )

    @property
    def input_shape(self) -> tuple:
        return self.layers[0].input_shape

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer_index(self, layer_name: str) -> int:
        try:
            return self._index[layer_name]
        except KeyError:
            raise ModelError(
                f"unknown layer {layer_name!r}; known layers: {', '.join(self.layer_names)}"
            ) from None

    def output_shape_of(self, layer_name: str) -> tuple:
        return self.layers[self.layer_index(layer_name)].output_shape

    def copy(self) -> "LayeredModel":
        layers = []
        for layer in self.layers:
            clone = build_layer(layer.tag, layer.name, layer.shape_dims())
            clone.params = {k: v.copy() for k, v in layer.params.items()}
            layers.append(clone)
        return LayeredModel(layers, self.class_count)

    def parameters(self):
        """Yield (layer_name, param_name, array) in a fixed order."""
        for layer in self.layers:
            for key in sorted(layer.params):
                yield layer.name, key, layer.params[key]

    # batch helpers -------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ModelError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x

    def run(self, x: np.ndarray, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Apply layers[start:stop] to a batch."""
        for layer in self.layers[start:stop]:
            x = layer.forward(x)
        return x

    def activations(self, x: np.ndarray, layer_name: str) -> np.ndarray:
        """Batch f_l: (N, *input_shape) -> (N, activation_size)."""
        x = self._check_input(x)
        idx = self.layer_index(layer_name)
        return self.run(x, 0, idx + 1).reshape(x.shape[0], -1)

    def tail_logits(self, acts: np.ndarray, layer_name: str) -> np.ndarray:
        """Batch h_l: flattened activations at ``layer_name`` -> logits."""
        idx = self.layer_index(layer_name)
        shape = self.layers[idx].output_shape
        acts = np.asarray(acts, dtype=np.float64)
        if acts.ndim != 2 or acts.shape[1] != int(np.prod(shape)):
            raise ModelError(
                f"activation of size {acts.shape[1:]} does not match layer {layer_name!r} output {shape}"
            )
        return self.run(acts.reshape(acts.shape[0], *shape), idx + 1)

    def tail_gradients(self, acts: np.ndarray, layer_name: str, class_k: int) -> np.ndarray:
        """Gradient of logit ``class_k`` w.r.t. each row of ``acts``."""
        if not 0 <= class_k < self.class_count:
            raise ModelError(f"class index {class_k} out of range for {self.class_count} classes")
        idx = self.layer_index(layer_name)
        shape = self.layers[idx].output_shape
        acts = np.asarray(acts, dtype=np.float64)
        if acts.ndim != 2 or acts.shape[1] != int(np.prod(shape)):
            raise ModelError(
                f"activation of size {acts.shape[1:]} does not match layer {layer_name!r} output {shape}"
            )
        x = acts.reshape(acts.shape[0], *shape)
        inputs = []
        for layer in self.layers[idx + 1 :]:
            inputs.append(x)
            x = layer.forward(x)
        grad = np.zeros_like(x)
        grad[:, class_k] = 1.0
        for layer, inp in zip(reversed(self.layers[idx + 1 :]), reversed(inputs)):
            grad, _ = layer.backward(inp, grad)
        return grad.reshape(acts.shape[0], -1)

    def logit_gradients(self, x: np.ndarray, layer_name: str, class_k: int) -> np.ndarray:
        return self.tail_gradients(self.activations(x, layer_name), layer_name, class_k)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.run(self._check_input(x))


def _image_batch(model: LayeredModel, image: ImageSample) -> np.ndarray:
    if image.shape != model.input_shape:
        raise ModelError(f"input shape {image.shape} does not match model input {model.input_shape}")
    return image.pixels[None]


def stack_pixels(images: Sequence[ImageSample]) -> np.ndarray:
    if not images:
        raise ValueError("no images")
    return np.stack([img.pixels for img in images])


# --------------------------------------------------------------------------
# public operations


def forward_to_layer(model: LayeredModel, input: ImageSample, layer_name: str) -> LayerActivation:
    idx = model.layer_index(layer_name)
    values = model.run(_image_batch(model, input), 0, idx + 1)[0]
    return LayerActivation(layer_name, values.reshape(-1), model.layers[idx].output_shape)


def layer_to_logits(model: LayeredModel, activation: LayerActivation) -> np.ndarray:
    idx = model.layer_index(activation.layer_name)
    if tuple(activation.original_shape) != model.layers[idx].output_shape:
        raise ModelError(
            f"activation shape {activation.original_shape} does not match "
            f"layer {activation.layer_name!r} output {model.layers[idx].output_shape}"
        )
    return model.tail_logits(activation.values[None], activation.layer_name)[0]


def grad_logit_wrt_activation(
    model: LayeredModel, input: ImageSample, layer_name: str, class_k: int
) -> np.ndarray:
    """Gradient of the class-k logit w.r.t. the flattened activation at ``layer_name``."""
    return model.logit_gradients(_image_batch(model, input), layer_name, class_k)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: LayeredModel, input: ImageSample) -> tuple[int, np.ndarray]:
    probs = softmax(model.logits(_image_batch(model, input))[0])
    # np.argmax returns the first maximum, i.e. lowest index on ties
    return int(np.argmax(probs)), probs


def predict_batch(model: LayeredModel, images: Sequence[ImageSample], batch_size: int = 256) -> np.ndarray:
    x = stack_pixels(images)
    out = [np.argmax(model.logits(x[i : i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(int)


# --------------------------------------------------------------------------
# construction and training


def reference_model(
    class_count: int,
    input_shape: Sequence[int] = (32, 32, 3),
    seed: int = 0,
    conv_filters: Sequence[int] = (8, 16),
    hidden: int = 32,
    zero_head: bool = False,
) -> LayeredModel:
    """conv -> relu -> conv -> relu -> flatten -> dense -> relu -> dense(logits).

    Weights are He-normal, biases zero. ``zero_head`` starts the logit layer
    at zero instead.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    shape = tuple(input_shape)
    for i, f in enumerate(conv_filters, start=1):
        conv = Conv2D(f"conv{i}", shape, filters=f, kernel_size=3)
        fan_in = 9 * shape[2]
        conv.params["kernel"][...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), conv.params["kernel"].shape)
        layers.append(conv)
        layers.append(ReLU(f"relu{i}", conv.output_shape))
        shape = conv.output_shape
    layers.append(Flatten("flatten", shape))
    n = int(np.prod(shape))
    dense = Dense("dense1", (n,), hidden)
    dense.params["weight"][...] = rng.normal(0.0, np.sqrt(2.0 / n), dense.params["weight"].shape)
    layers.append(dense)
    layers.append(ReLU(f"relu{len(conv_filters) + 1}", (hidden,)))
    head = Dense("logits", (hidden,), class_count)
    if not zero_head:
        head.params["weight"][...] = rng.normal(0.0, np.sqrt(2.0 / hidden), head.params["weight"].shape)
    layers.append(head)
    return LayeredModel(layers, class_count)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: Optional[float]


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    probs = softmax(logits)
    loss = -np.mean(np.log(np.clip(probs[np.arange(n), labels], 1e-300, None)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def parameter_gradients(model: LayeredModel, x: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        x = layer.forward(x)
    loss, grad = cross_entropy_grad(x, labels)
    grads = {}
    for layer, inp in zip(reversed(model.layers), reversed(inputs)):
        grad, pg = layer.backward(inp, grad)
        for key, g in pg.items():
            grads[(layer.name, key)] = g
    return loss, grads


def _check_labels(model: LayeredModel, data: Sequence[ImageSample], what: str) -> np.ndarray:
    if len(data) == 0:
        raise ValueError(f"{what} dataset is empty")
    labels = np.array([-1 if s.label is None else s.label for s in data])
    bad = np.flatnonzero((labels < 0) | (labels >= model.class_count))
    if bad.size:
        raise ValueError(
            f"{what} sample {int(bad[0])} has label {data[int(bad[0])].label!r}, "
            f"expected 0..{model.class_count - 1}"
        )
    return labels


def train_classifier(
    model: LayeredModel,
    train: Sequence[ImageSample],
    val: Sequence[ImageSample],
    cfg: TrainConfig,
) -> tuple[LayeredModel, list[EpochStats]]:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    Returns a trained copy; the input model is not modified.
    """
    y = _check_labels(model, train, "train")
    y_val = _check_labels(model, val, "validation") if len(val) else None
    x = stack_pixels(train)
    x = model._check_input(x)
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = {(ln, k): np.zeros(p.shape, dtype=np.float64) for ln, k, p in model.parameters()}
    layers = {layer.name: layer for layer in model.layers}
    trace: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = parameter_gradients(model, x[idx], y[idx])
            losses += loss * len(idx)
            for key, g in grads.items():
                v = velocity[key]
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p = layers[key[0]].params[key[1]]
                p[...] = (p.astype(np.float64) + v).astype(np.float32)
        train_pred = np.argmax(_batched_logits(model, x), axis=1)
        correct = int(np.sum(train_pred == y))
        val_acc = None
        if y_val is not None:
            val_pred = predict_batch(model, val)
            val_acc = float(np.mean(val_pred == y_val))
        trace.append(EpochStats(epoch + 1, losses / len(x), correct / len(x), val_acc))
    return model, trace


def _batched_logits(model: LayeredModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([model.run(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
