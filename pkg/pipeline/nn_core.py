"""
Minimal sequence-classification networks in numpy.

Three families (time-distributed dense, LSTM, 1-D convolution) built from a
declarative ModelSpec, with hand-derived gradients per layer type, Adam,
plateau learning-rate scheduling, a deterministic training loop and a
versioned model container.
"""

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass
from typing import Annotated, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from pipeline.errors import (
    CorruptContainer,
    EmptyTrainSet,
    InvalidSpec,
    ShapeMismatch,
    VersionMismatch,
)
from pipeline.ingest_builder import InstanceSet
from pipeline.preprocess import PreprocessConfig
from pipeline_config import (
    CONTAINER_MAGIC,
    CONTAINER_VERSION,
    FAMILY_BOUNDS,
    MAX_CONV_STRIDE,
    MAX_POOL_SECTIONS,
    N_CLASSES,
)

logger = logging.getLogger(__name__)

Activation = Literal["relu", "tanh", "linear"]
Family = Literal["lstm", "td_dense", "conv1d"]

LOSS_CLIP = 1e-7


# Specs

class DenseSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["dense"] = "dense"
    units: int = Field(ge=1)
    activation: Activation = "relu"


class TimeDistributedDenseSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["td_dense"] = "td_dense"
    units: int = Field(ge=1)
    activation: Activation = "relu"


class Conv1dSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["conv1d"] = "conv1d"
    filters: int = Field(ge=1)
    kernel_size: int = Field(ge=1)
    stride: int = Field(default=1, ge=1, le=MAX_CONV_STRIDE)
    padding: Literal["causal", "same"] = "causal"


class LstmSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["lstm"] = "lstm"
    units: int = Field(ge=1)
    return_sequences: bool = False


class FlattenSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["flatten"] = "flatten"


class AdaptiveAvgPoolSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["adaptive_avg_pool"] = "adaptive_avg_pool"
    sections: int = Field(ge=1, le=MAX_POOL_SECTIONS)


class SoftmaxOutputSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: Literal["softmax_output"] = "softmax_output"
    classes: Literal[10] = N_CLASSES


LayerSpec = Annotated[
    Union[
        DenseSpec,
        TimeDistributedDenseSpec,
        Conv1dSpec,
        LstmSpec,
        FlattenSpec,
        AdaptiveAvgPoolSpec,
        SoftmaxOutputSpec,
    ],
    Field(discriminator="kind"),
]


class ModelSpec(BaseModel):
    """Input shape (W, F), ordered layers and the family they conform to."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_shape: Tuple[int, int]
    layers: List[LayerSpec]
    family: Family


def layer_output_shape(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Per-sample output shape of a layer; raises InvalidSpec on rank errors."""
    kind = layer.kind
    if kind in ("td_dense", "conv1d", "lstm", "flatten", "adaptive_avg_pool") and len(shape) != 2:
        raise InvalidSpec(f"{kind} needs a (T, D) input, got {shape}")
    if kind in ("dense", "softmax_output") and len(shape) != 1:
        raise InvalidSpec(f"{kind} needs a flat input, got {shape}; add a flatten layer")
    if kind == "dense":
        return (layer.units,)
    if kind == "td_dense":
        return (shape[0], layer.units)
    if kind == "conv1d":
        return (math.ceil(shape[0] / layer.stride), layer.filters)
    if kind == "lstm":
        return (shape[0], layer.units) if layer.return_sequences else (layer.units,)
    if kind == "flatten":
        return (shape[0] * shape[1],)
    if kind == "adaptive_avg_pool":
        return (min(layer.sections, shape[0]), shape[1])
    return (layer.classes,)


def layer_param_count(layer: LayerSpec, shape: Tuple[int, ...]) -> int:
    kind = layer.kind
    width = shape[-1]
    if kind in ("dense", "td_dense"):
        return width * layer.units + layer.units
    if kind == "conv1d":
        return layer.kernel_size * width * layer.filters + layer.filters
    if kind == "lstm":
        return 4 * layer.units * (width + layer.units + 1)
    if kind == "softmax_output":
        return width * layer.classes + layer.classes
    return 0


def count_parameters(spec: ModelSpec) -> int:
    """Parameter count from layer dimensions alone."""
    shape: Tuple[int, ...] = tuple(spec.input_shape)
    total = 0
    for layer in spec.layers:
        total += layer_param_count(layer, shape)
        shape = layer_output_shape(layer, shape)
    return total


def _kinds_match(kinds: List[str], pattern: List[Tuple[str, int, int]]) -> bool:
    """Match kinds against [(kind, min_count, max_count), ...] in order."""
    pos = 0
    for kind, low, high in pattern:
        count = 0
        while pos < len(kinds) and kinds[pos] == kind and count < high:
            pos += 1
            count += 1
        if count < low:
            return False
    return pos == len(kinds)


def validate_spec(spec: ModelSpec) -> None:
    """
    Check the spec against its family's topology and bounds.

    Raises:
        InvalidSpec: On any violated bound or a layer sequence the family does not allow
    """
    if min(spec.input_shape) < 1:
        raise InvalidSpec(f"input shape must be positive, got {spec.input_shape}")
    if not spec.layers or spec.layers[-1].kind != "softmax_output":
        raise InvalidSpec("every model ends in a softmax output layer")
    kinds = [layer.kind for layer in spec.layers]
    bounds = FAMILY_BOUNDS[spec.family]
    n_min, n_max, width = bounds["min_layers"], bounds["max_layers"], bounds["max_units"]

    if spec.family == "lstm":
        pattern = [("lstm", n_min, n_max), ("softmax_output", 1, 1)]
        recurrent = [layer for layer in spec.layers if layer.kind == "lstm"]
        if any(layer.units > width for layer in recurrent):
            raise InvalidSpec(f"LSTM layers have at most {width} units")
        if any(not layer.return_sequences for layer in recurrent[:-1]):
            raise InvalidSpec("stacked LSTM layers must return sequences")
        if recurrent and recurrent[-1].return_sequences:
            raise InvalidSpec("the last LSTM layer must not return sequences")
    elif spec.family == "td_dense":
        pattern = [("td_dense", n_min, n_max), ("flatten", 1, 1), ("dense", 0, n_max), ("softmax_output", 1, 1)]
        if any(getattr(layer, "units", 0) > width for layer in spec.layers if layer.kind != "softmax_output"):
            raise InvalidSpec(f"dense layers have at most {width} units")
    else:
        pattern = [("conv1d", n_min, n_max), ("adaptive_avg_pool", 0, 1), ("flatten", 1, 1), ("softmax_output", 1, 1)]
        if any(layer.filters > width for layer in spec.layers if layer.kind == "conv1d"):
            raise InvalidSpec(f"convolutions have at most {width} filters")
        if any(not 1 <= layer.stride <= MAX_CONV_STRIDE for layer in spec.layers if layer.kind == "conv1d"):
            raise InvalidSpec(f"convolution stride must be in 1..{MAX_CONV_STRIDE}")
        if any(not 1 <= layer.sections <= MAX_POOL_SECTIONS
               for layer in spec.layers if layer.kind == "adaptive_avg_pool"):
            raise InvalidSpec(f"pooling sections must be in 1..{MAX_POOL_SECTIONS}")

    if not _kinds_match(kinds, pattern):
        raise InvalidSpec(f"layer sequence {kinds} does not fit the {spec.family} family")
    count_parameters(spec)


def td_dense_spec(
    window_len: int,
    feature_len: int,
    td_layers: int,
    td_units: int,
    dense_layers: int = 0,
    dense_units: int = 64,
) -> ModelSpec:
    """TD-dense stack, flatten, dense stack, softmax. Either stack may be empty."""
    layers = [TimeDistributedDenseSpec(units=td_units) for _ in range(td_layers)]
    layers.append(FlattenSpec())
    layers += [DenseSpec(units=dense_units) for _ in range(dense_layers)]
    layers.append(SoftmaxOutputSpec())
    return ModelSpec(input_shape=(window_len, feature_len), layers=layers, family="td_dense")


def lstm_spec(window_len: int, feature_len: int, layers: int, units: int) -> ModelSpec:
    """Stacked LSTM; only the last layer collapses the time axis."""
    stack = [LstmSpec(units=units, return_sequences=i < layers - 1) for i in range(layers)]
    return ModelSpec(input_shape=(window_len, feature_len), layers=stack + [SoftmaxOutputSpec()], family="lstm")


def conv1d_spec(
    window_len: int,
    feature_len: int,
    layers: int,
    filters: int,
    kernel_size: int = 3,
    stride: int = 1,
    padding: str = "causal",
    double_filters: bool = False,
    pool_sections: Optional[int] = None,
) -> ModelSpec:
    """Convolution stack with optional per-layer filter doubling (capped) and average pooling."""
    cap = FAMILY_BOUNDS["conv1d"]["max_units"]
    stack: List[LayerSpec] = []
    for i in range(layers):
        width = min(filters * 2 ** i, cap) if double_filters else filters
        stack.append(Conv1dSpec(filters=width, kernel_size=kernel_size, stride=stride, padding=padding))
    if pool_sections:
        stack.append(AdaptiveAvgPoolSpec(sections=pool_sections))
    stack += [FlattenSpec(), SoftmaxOutputSpec()]
    return ModelSpec(input_shape=(window_len, feature_len), layers=stack, family="conv1d")


def reference_td_dense_spec(feature_len: int, window_len: int = 104) -> ModelSpec:
    """The best model found for the assembly task: 11 TD-dense x 188, 2 dense x 457."""
    return td_dense_spec(window_len, feature_len, td_layers=11, td_units=188, dense_layers=2, dense_units=457)


# Layers

def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(grad: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return grad * (a > 0)
    if activation == "tanh":
        return grad * (1 - a * a)
    return grad


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1)


class Layer:
    """Base layer: named parameters, their gradients, forward and backward."""

    def __init__(self, spec: LayerSpec, input_shape: Tuple[int, ...]):
        self.spec = spec
        self.input_shape = input_shape
        self.output_shape = layer_output_shape(spec, input_shape)
        self.params: dict = {}
        self.grads: dict = {}

    def initialize(self, rng: np.random.Generator, dtype) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    """Dense on (B, D) and time-distributed dense on (B, T, D); weights shared over T."""

    def initialize(self, rng, dtype):
        width = self.input_shape[-1]
        units = self.spec.units
        self.params = {
            "kernel": _glorot(rng, (width, units), width, units).astype(dtype),
            "bias": np.zeros(units, dtype=dtype),
        }

    def forward(self, x):
        self.x = x
        self.a = _activate(x @ self.params["kernel"] + self.params["bias"], self.spec.activation)
        return self.a

    def backward(self, grad):
        dz = _activation_grad(grad, self.a, self.spec.activation)
        x2 = self.x.reshape(-1, self.x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        self.grads = {"kernel": x2.T @ dz2, "bias": dz2.sum(axis=0)}
        return dz @ self.params["kernel"].T


class SoftmaxOutput(Dense):
    """Dense projection to class logits; the softmax itself is applied by the model."""

    def initialize(self, rng, dtype):
        width = self.input_shape[-1]
        classes = self.spec.classes
        self.params = {
            "kernel": _glorot(rng, (width, classes), width, classes).astype(dtype),
            "bias": np.zeros(classes, dtype=dtype),
        }

    def forward(self, x):
        self.x = x
        self.a = x @ self.params["kernel"] + self.params["bias"]
        return self.a

    def backward(self, grad):
        self.grads = {"kernel": self.x.T @ grad, "bias": grad.sum(axis=0)}
        return grad @ self.params["kernel"].T


class Conv1d(Layer):
    """
    1-D convolution over time with ReLU.

    Output length is ceil(T / stride) for both paddings. Causal padding puts
    K - 1 zeros in front; same padding splits the needed zeros, extra on the
    right.
    """

    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        steps, kernel, stride = input_shape[0], spec.kernel_size, spec.stride
        out_len = self.output_shape[0]
        if spec.padding == "causal":
            self.pad = (kernel - 1, 0)
        else:
            total = max((out_len - 1) * stride + kernel - steps, 0)
            self.pad = (total // 2, total - total // 2)
        self.index = np.arange(out_len)[:, None] * stride + np.arange(kernel)[None, :]  # (T', K)

    def initialize(self, rng, dtype):
        kernel, channels, filters = self.spec.kernel_size, self.input_shape[-1], self.spec.filters
        self.params = {
            "kernel": _glorot(rng, (kernel, channels, filters), kernel * channels, kernel * filters).astype(dtype),
            "bias": np.zeros(filters, dtype=dtype),
        }

    def forward(self, x):
        self.padded_len = x.shape[1] + sum(self.pad)
        padded = np.pad(x, ((0, 0), self.pad, (0, 0)))
        self.cols = padded[:, self.index, :]                                  # (B, T', K, C)
        z = np.einsum("btkc,kcf->btf", self.cols, self.params["kernel"]) + self.params["bias"]
        self.a = np.maximum(z, 0)
        return self.a

    def backward(self, grad):
        dz = grad * (self.a > 0)
        self.grads = {
            "kernel": np.einsum("btkc,btf->kcf", self.cols, dz),
            "bias": dz.sum(axis=(0, 1)),
        }
        dcols = np.einsum("btf,kcf->btkc", dz, self.params["kernel"])
        dpadded = np.zeros((dz.shape[0], self.padded_len, self.input_shape[-1]), dtype=dz.dtype)
        for k in range(self.spec.kernel_size):
            dpadded[:, self.index[:, k], :] += dcols[:, :, k, :]
        return dpadded[:, self.pad[0]:self.padded_len - self.pad[1], :]


class Lstm(Layer):
    """LSTM with gate order input, forget, cell, output; backpropagation through time."""

    def initialize(self, rng, dtype):
        width, units = self.input_shape[-1], self.spec.units
        bias = np.zeros(4 * units)
        bias[units:2 * units] = 1.0
        self.params = {
            "kernel": _glorot(rng, (width, 4 * units), width, 4 * units).astype(dtype),
            "recurrent_kernel": _glorot(rng, (units, 4 * units), units, 4 * units).astype(dtype),
            "bias": bias.astype(dtype),
        }

    def forward(self, x):
        batch, steps, _ = x.shape
        units = self.spec.units
        kernel, recurrent, bias = self.params["kernel"], self.params["recurrent_kernel"], self.params["bias"]
        self.x = x
        projected = x @ kernel + bias
        h = np.zeros((batch, units), dtype=x.dtype)
        c = np.zeros((batch, units), dtype=x.dtype)
        self.gates = np.empty((batch, steps, 4 * units), dtype=x.dtype)
        self.cells = np.empty((batch, steps + 1, units), dtype=x.dtype)
        self.hidden = np.empty((batch, steps + 1, units), dtype=x.dtype)
        self.cells[:, 0] = c
        self.hidden[:, 0] = h
        for t in range(steps):
            z = projected[:, t] + h @ recurrent
            i = _sigmoid(z[:, :units])
            f = _sigmoid(z[:, units:2 * units])
            g = np.tanh(z[:, 2 * units:3 * units])
            o = _sigmoid(z[:, 3 * units:])
            c = f * c + i * g
            h = o * np.tanh(c)
            self.gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            self.cells[:, t + 1] = c
            self.hidden[:, t + 1] = h
        return self.hidden[:, 1:] if self.spec.return_sequences else h

    def backward(self, grad):
        batch, steps, _ = self.x.shape
        units = self.spec.units
        recurrent = self.params["recurrent_kernel"]
        dh_next = np.zeros((batch, units), dtype=grad.dtype)
        dc_next = np.zeros((batch, units), dtype=grad.dtype)
        dz_all = np.empty((batch, steps, 4 * units), dtype=grad.dtype)
        d_recurrent = np.zeros_like(recurrent)
        for t in reversed(range(steps)):
            if self.spec.return_sequences:
                dh = dh_next + grad[:, t]
            else:
                dh = dh_next + grad if t == steps - 1 else dh_next
            gates = self.gates[:, t]
            i, f, g, o = (gates[:, k * units:(k + 1) * units] for k in range(4))
            c_prev, c = self.cells[:, t], self.cells[:, t + 1]
            tanh_c = np.tanh(c)
            dc = dc_next + dh * o * (1 - tanh_c * tanh_c)
            dz = np.concatenate([
                dc * g * i * (1 - i),
                dc * c_prev * f * (1 - f),
                dc * i * (1 - g * g),
                dh * tanh_c * o * (1 - o),
            ], axis=1)
            dz_all[:, t] = dz
            d_recurrent += self.hidden[:, t].T @ dz
            dh_next = dz @ recurrent.T
            dc_next = dc * f
        self.grads = {
            "kernel": np.einsum("btd,btg->dg", self.x, dz_all),
            "recurrent_kernel": d_recurrent,
            "bias": dz_all.sum(axis=(0, 1)),
        }
        return dz_all @ self.params["kernel"].T


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape((grad.shape[0],) + self.input_shape)


class AdaptiveAvgPool(Layer):
    """Mean over `sections` contiguous near-equal spans of the time axis."""

    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        steps = input_shape[0]
        sections = self.output_shape[0]
        weights = np.zeros((sections, steps))
        for s in range(sections):
            start, end = (s * steps) // sections, ((s + 1) * steps) // sections
            weights[s, start:end] = 1.0 / (end - start)
        self.weights = weights

    def forward(self, x):
        return np.einsum("st,btc->bsc", self.weights.astype(x.dtype), x)

    def backward(self, grad):
        return np.einsum("st,bsc->btc", self.weights.astype(grad.dtype), grad)


LAYER_TYPES = {
    "dense": Dense,
    "td_dense": Dense,
    "conv1d": Conv1d,
    "lstm": Lstm,
    "flatten": Flatten,
    "adaptive_avg_pool": AdaptiveAvgPool,
    "softmax_output": SoftmaxOutput,
}


# Model

class ModelManifest(BaseModel):
    """How the input windows of a model were produced."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    preprocess: PreprocessConfig = PreprocessConfig()
    fps: int = 30
    window_len: int = Field(ge=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class Model:
    """A built network: spec, initialized layers and an optional preprocess manifest."""

    def __init__(self, spec: ModelSpec, layers: List[Layer], manifest: Optional[ModelManifest] = None):
        self.spec = spec
        self.layers = layers
        self.manifest = manifest

    @property
    def dtype(self):
        for array in self.parameters():
            return array.dtype
        return np.dtype(np.float32)

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in spec order (layer order, then kernel/recurrent/bias)."""
        return [array for layer in self.layers for array in layer.params.values()]

    def parameter_names(self) -> List[str]:
        return [f"{i}.{layer.spec.kind}.{name}" for i, layer in enumerate(self.layers) for name in layer.params]

    def gradients(self) -> List[np.ndarray]:
        return [layer.grads[name] for layer in self.layers for name in layer.params]

    @property
    def param_count(self) -> int:
        return int(sum(array.size for array in self.parameters()))

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        slots = [(layer, name) for layer in self.layers for name in layer.params]
        if len(arrays) != len(slots):
            raise ShapeMismatch(f"expected {len(slots)} parameter tensors, got {len(arrays)}")
        for (layer, name), array in zip(slots, arrays):
            if array.shape != layer.params[name].shape:
                raise ShapeMismatch(f"{name}: expected shape {layer.params[name].shape}, got {array.shape}")
            layer.params[name] = array

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast to dtype."""
        copy = build_model(self.spec, seed=0, dtype=dtype)
        copy.set_parameters([array.astype(dtype) for array in self.parameters()])
        copy.manifest = self.manifest
        return copy

    def check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != 3 or tuple(batch.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatch(
                f"batch shape {batch.shape} does not match model input (B, {self.spec.input_shape[0]}, "
                f"{self.spec.input_shape[1]})"
            )
        return batch.astype(self.dtype, copy=False)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        x = self.check_batch(batch)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return softmax(self.logits(batch))

    def backward(self, batch: np.ndarray, labels: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """Mean cross-entropy of the batch and its gradient for every parameter."""
        probabilities = self.forward(batch)
        targets = _class_ids(labels, len(probabilities))
        value = loss(probabilities, targets)
        grad = probabilities.copy()
        grad[np.arange(len(targets)), targets] -= 1
        grad /= len(targets)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return value, self.gradients()


def _class_ids(labels: np.ndarray, batch_size: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    if labels.shape != (batch_size,):
        raise ShapeMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {batch_size}")
    return labels.astype(np.int64)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """
    Build a model with Glorot-uniform weights from a seeded generator.

    Biases start at zero except the LSTM forget gate, which starts at one.

    Raises:
        InvalidSpec: If the spec violates its family bounds
    """
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    layers = []
    shape: Tuple[int, ...] = tuple(spec.input_shape)
    for layer_spec in spec.layers:
        layer = LAYER_TYPES[layer_spec.kind](layer_spec, shape)
        layer.initialize(rng, dtype)
        layers.append(layer)
        shape = layer.output_shape
    return Model(spec, layers)


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


def loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -log p[true class], p clipped to [1e-7, 1]."""
    probabilities = np.asarray(probabilities)
    targets = _class_ids(labels, len(probabilities))
    picked = probabilities[np.arange(len(targets)), targets]
    return float(np.mean(-np.log(np.clip(picked, LOSS_CLIP, 1.0))))


def backward(model: Model, batch: np.ndarray, labels: np.ndarray) -> List[np.ndarray]:
    return model.backward(batch, labels)[1]


def gradient_check(model: Model, batch: np.ndarray, labels: np.ndarray, h: float = 1e-5) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    Runs on a double-precision copy of the model. The relative error of one
    parameter is |a - n| / max(|a| + |n|, 1e-3).
    """
    checked = model.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    _, analytic = checked.backward(batch, labels)
    analytic = [g.copy() for g in analytic]
    worst = 0.0
    for array, grad in zip(checked.parameters(), analytic):
        flat = array.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            up = loss(checked.forward(batch), labels)
            flat[j] = original - h
            down = loss(checked.forward(batch), labels)
            flat[j] = original
            numeric = (up - down) / (2 * h)
            exact = grad.reshape(-1)[j]
            worst = max(worst, abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-3))
    return worst


# Optimization

class AdamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-7, gt=0.0)


@dataclass
class AdamState:
    """First and second moments per parameter and the step counter."""
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, model: Model) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in model.parameters()],
            v=[np.zeros_like(p) for p in model.parameters()],
        )


def adam_step(
    model: Model,
    gradients: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    config: AdamConfig = AdamConfig(),
) -> Tuple[Model, AdamState]:
    """One bias-corrected Adam update, in place; returns the model and state."""
    state.t += 1
    correction1 = 1 - config.beta1 ** state.t
    correction2 = 1 - config.beta2 ** state.t
    for param, grad, m, v in zip(model.parameters(), gradients, state.m, state.v):
        m *= config.beta1
        m += (1 - config.beta1) * grad
        v *= config.beta2
        v += (1 - config.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(param.dtype)
    return model, state


class PlateauConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    monitor: Literal["val_loss", "train_loss"] = "val_loss"
    factor: float = Field(default=0.1, gt=0.0, lt=1.0)
    patience: int = Field(default=10, ge=1)
    min_delta: float = Field(default=1e-4, ge=0.0)
    min_lr: float = Field(default=1e-7, ge=0.0)
    cooldown: Optional[int] = Field(default=None, ge=0)   # None: same as patience


class PlateauScheduler:
    """Reduce the learning rate when the monitored loss stops improving."""

    def __init__(self, config: PlateauConfig, lr: float):
        self.config = config
        self.lr = lr
        self.best = math.inf
        self.wait = 0
        self.cooldown_left = 0

    @property
    def cooldown(self) -> int:
        return self.config.patience if self.config.cooldown is None else self.config.cooldown

    def step(self, value: float, update: bool = True) -> float:
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.wait = 0
        if value < self.best - self.config.min_delta:
            self.best = value
            self.wait = 0
        elif self.cooldown_left <= 0:
            self.wait += 1
            if self.wait >= self.config.patience:
                self.wait = 0
                self.cooldown_left = self.cooldown
                if update and self.lr > self.config.min_lr:
                    reduced = max(self.lr * self.config.factor, self.config.min_lr)
                    logger.info("Reducing learning rate %.3g -> %.3g", self.lr, reduced)
                    self.lr = reduced
        return self.lr


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None
    learning_rate: float


class TrainHistory(BaseModel):
    epochs: List[EpochRecord] = []

    def monitored(self, monitor: str) -> List[float]:
        values = []
        for record in self.epochs:
            value = record.val_loss if monitor == "val_loss" else record.train_loss
            values.append(record.train_loss if value is None else value)
        return values


def reduce_lr_on_plateau(
    history: Union[TrainHistory, Sequence[float]],
    config: PlateauConfig,
    lr: float,
) -> float:
    """
    Learning rate after the most recent epoch of history.

    The plateau state (best value, patience counter, cooldown) is rebuilt by
    replaying the earlier epochs; only the decision on the last epoch
    changes the returned rate.
    """
    values = history.monitored(config.monitor) if isinstance(history, TrainHistory) else list(history)
    if not values:
        raise ValueError("history must not be empty")
    scheduler = PlateauScheduler(config, lr)
    for value in values[:-1]:
        scheduler.step(value, update=False)
    return scheduler.step(values[-1])


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=1e-4, gt=0.0)
    epochs: int = Field(default=32, ge=1)
    batch_size: int = Field(default=64, ge=1)
    adam: AdamConfig = AdamConfig()
    plateau: PlateauConfig = PlateauConfig()
    seed: int = 0


@dataclass(eq=False)
class EvaluationResult:
    predictions: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray
    loss: float
    accuracy: float


def predict_batch(model: Model, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    probabilities = model.forward(batch)
    return probabilities.argmax(axis=1), probabilities


def predict(model: Model, window: np.ndarray) -> Tuple[int, np.ndarray]:
    """
    Class of one (W, F) window, or of a (1, W, F) batch; ties go to the
    lowest class id.

    Raises:
        ShapeMismatch: If more than one window is given
    """
    window = np.asarray(window)
    if window.ndim not in (2, 3) or (window.ndim == 3 and window.shape[0] != 1):
        raise ShapeMismatch(f"predict takes one (W, F) window, got shape {window.shape}; use predict_batch")
    batch = window[None] if window.ndim == 2 else window
    classes, probabilities = predict_batch(model, batch)
    return int(classes[0]), probabilities[0]


def evaluate(model: Model, instances: InstanceSet, batch_size: int = 256) -> EvaluationResult:
    """Predictions, probabilities, mean loss and accuracy over an instance set."""
    labels = instances.labels
    probabilities = np.empty((len(instances), N_CLASSES), dtype=model.dtype)
    for index in instances.iter_batches(batch_size):
        features, _ = instances.batch(index)
        probabilities[index] = model.forward(features)
    predictions = probabilities.argmax(axis=1)
    if len(instances) == 0:
        return EvaluationResult(predictions, probabilities, labels, math.nan, math.nan)
    return EvaluationResult(
        predictions=predictions,
        probabilities=probabilities,
        labels=labels,
        loss=loss(probabilities, labels),
        accuracy=float(np.mean(predictions == labels)),
    )


def train(
    spec: ModelSpec,
    train_set: InstanceSet,
    val_set: Optional[InstanceSet],
    config: TrainConfig = TrainConfig(),
    manifest: Optional[ModelManifest] = None,
) -> Tuple[Model, TrainHistory]:
    """
    Train a freshly built model with Adam and plateau scheduling.

    Each epoch visits the training windows in an order drawn from a
    generator seeded with config.seed, so equal seeds give equal runs.
    Without validation windows the plateau monitor falls back to the
    training loss.

    Raises:
        EmptyTrainSet: If train_set has no windows
    """
    if len(train_set) == 0:
        raise EmptyTrainSet("no training windows")
    model = build_model(spec, config.seed)
    model.manifest = manifest
    model.check_batch(train_set.batch(np.arange(1))[0])

    has_val = val_set is not None and len(val_set) > 0
    plateau = config.plateau
    if plateau.monitor == "val_loss" and not has_val:
        logger.warning("No validation windows; the learning-rate schedule monitors the training loss")
        plateau = plateau.model_copy(update={"monitor": "train_loss"})

    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(model)
    scheduler = PlateauScheduler(plateau, config.learning_rate)
    history = TrainHistory()
    labels = train_set.labels

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = scheduler.lr
        total_loss, correct = 0.0, 0
        for index in train_set.iter_batches(config.batch_size, rng.permutation(len(train_set))):
            features, _ = train_set.batch(index)
            batch_loss, gradients = model.backward(features, labels[index])
            adam_step(model, gradients, state, lr, config.adam)
            total_loss += batch_loss * len(index)
            correct += int(np.sum(model.layers[-1].a.argmax(axis=1) == labels[index]))
        record = EpochRecord(
            epoch=epoch + 1,
            train_loss=total_loss / len(train_set),
            train_accuracy=correct / len(train_set),
            learning_rate=lr,
        )
        if has_val:
            result = evaluate(model, val_set, max(config.batch_size, 256))
            record.val_loss, record.val_accuracy = result.loss, result.accuracy
        history.epochs.append(record)
        scheduler.step(record.val_loss if plateau.monitor == "val_loss" else record.train_loss)
        logger.info(
            "epoch %d/%d loss %.4f acc %.4f val_loss %s val_acc %s lr %.3g (%.1fs)",
            epoch + 1, config.epochs, record.train_loss, record.train_accuracy,
            "n/a" if record.val_loss is None else f"{record.val_loss:.4f}",
            "n/a" if record.val_accuracy is None else f"{record.val_accuracy:.4f}",
            lr, time.perf_counter() - started,
        )
    return model, history


# Container

def _container_bytes(model: Model) -> Tuple[bytes, bytes]:
    blobs = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.parameters())
    manifest = {
        "format_version": CONTAINER_VERSION,
        "spec": model.spec.model_dump(mode="json"),
        "preprocess": model.manifest.preprocess.model_dump(mode="json") if model.manifest else None,
        "fps": model.manifest.fps if model.manifest else None,
        "window_len": model.manifest.window_len if model.manifest else None,
        "class_count": N_CLASSES,
        "param_count": model.param_count,
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in zip(model.parameter_names(), model.parameters())],
        "checksum": hashlib.sha256(blobs).hexdigest(),
    }
    return json.dumps(manifest, sort_keys=True).encode("utf-8"), blobs


def save_model(model: Model, path: str) -> None:
    """
    Write the model container: magic, manifest length (uint32 LE), JSON
    manifest, then little-endian float32 parameter blobs in spec order.
    """
    manifest, blobs = _container_bytes(model)
    with open(path, "wb") as handle:
        handle.write(CONTAINER_MAGIC)
        handle.write(struct.pack("<I", len(manifest)))
        handle.write(manifest)
        handle.write(blobs)


def load_model(path: str) -> Model:
    """
    Read a model container.

    Raises:
        CorruptContainer: On bad magic bytes, unreadable manifest, size or checksum mismatch
        VersionMismatch: If the container was written by a newer format version
    """
    with open(path, "rb") as handle:
        data = handle.read()
    if not data.startswith(CONTAINER_MAGIC):
        raise CorruptContainer(f"{path} is not a model container (bad magic bytes)")
    offset = len(CONTAINER_MAGIC)
    if len(data) < offset + 4:
        raise CorruptContainer(f"{path} is truncated")
    (length,) = struct.unpack("<I", data[offset:offset + 4])
    offset += 4
    try:
        manifest = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptContainer(f"{path}: unreadable manifest ({e})") from e
    version = manifest.get("format_version")
    if not isinstance(version, int) or version > CONTAINER_VERSION:
        raise VersionMismatch(f"{path}: format version {version} is not supported (max {CONTAINER_VERSION})")

    blobs = data[offset + length:]
    if hashlib.sha256(blobs).hexdigest() != manifest.get("checksum"):
        raise CorruptContainer(f"{path}: parameter checksum mismatch")

    try:
        spec = ModelSpec.model_validate(manifest["spec"])
    except (KeyError, ValueError) as e:
        raise CorruptContainer(f"{path}: invalid model spec ({e})") from e
    model = build_model(spec, seed=0)
    shapes = [tuple(p.shape) for p in model.parameters()]
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(blobs) != expected:
        raise CorruptContainer(f"{path}: expected {expected} parameter bytes, found {len(blobs)}")
    arrays, position = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(blobs, dtype="<f4", count=size, offset=position).astype(np.float32).reshape(shape))
        position += size * 4
    model.set_parameters(arrays)
    if manifest.get("window_len") is not None:
        model.manifest = ModelManifest(
            preprocess=PreprocessConfig.model_validate(manifest["preprocess"]),
            fps=manifest["fps"],
            window_len=manifest["window_len"],
        )
    return model
