from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from src.entity.labels import SoftLabel, as_label_matrix
from src.entity.layers import Dense, Flatten, Layer, layer_from_descriptor
from src.entity.params import ParamSlot, ParamVector
from src.services.errors import LabelError, ShapeMismatchError

PROB_FLOOR = 1e-12

PRESETS: dict[str, list[dict]] = {
    "softmax": [],
    "mlp": [{"type": "dense", "units": 64}, {"type": "relu"}],
    "mlp2": [{"type": "dense", "units": 64}, {"type": "relu"}, {"type": "dense", "units": 32}, {"type": "relu"}],
    "simple": [
        {"type": "conv2d", "filters": 4, "kernel": 3, "padding": "same"},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "flatten"},
        {"type": "dense", "units": 64},
        {"type": "relu"},
    ],
    "deep": [
        {"type": "conv2d", "filters": 8, "kernel": 3, "padding": "same"},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "conv2d", "filters": 8, "kernel": 3, "padding": "same"},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "filters": 16, "kernel": 3, "padding": "same"},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "flatten"},
        {"type": "dense", "units": 128},
        {"type": "relu"},
        {"type": "dense", "units": 64},
        {"type": "relu"},
    ],
    "fmnist_cnn": [
        {"type": "conv2d", "filters": 8, "kernel": 5, "padding": "same"},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "filters": 16, "kernel": 5, "padding": "same"},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "flatten"},
        {"type": "dense", "units": 128},
        {"type": "relu"},
    ],
}


@dataclass
class ForwardPass:
    logits: np.ndarray
    probs: np.ndarray
    inputs: np.ndarray
    caches: list[Any] = field(default_factory=list)
    state: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = False


class Model:
    """
    Sequential classifier whose last layer emits ``num_classes`` logits.

    The model object owns its layer descriptors and one ParamVector; ``with_params`` yields a
    sibling sharing the layers, which is how clients and the server evaluate different weights
    of the same architecture.
    """

    def __init__(self, layers: list[Layer], input_shape: Sequence[int], num_classes: int, params: ParamVector | None = None, seed: int = 0):
        self.layers = layers
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        for index, layer in enumerate(layers):
            if layer.index != index or layer.input_shape != shape:
                layer.build(index, shape)
            shape = layer.output_shape
        if shape != (self.num_classes,):
            raise ShapeMismatchError(
                f"final layer emits {shape}, expected ({self.num_classes},) logits"
            )
        self.layout = self._layout()
        if params is None:
            params = self.initial_params(seed)
        if params.layout != self.layout:
            raise ShapeMismatchError("parameter layout does not match the architecture")
        self.params = params

    def _layout(self) -> tuple[ParamSlot, ...]:
        slots = []
        offset = 0
        for layer in self.layers:
            named = [(name, shape, True) for name, shape in layer.param_shapes().items()]
            named += [(name, shape, False) for name, shape in layer.state_shapes().items()]
            for name, shape, trainable in named:
                slot = ParamSlot(f"{layer.index}.{name}", offset, tuple(shape), trainable)
                slots.append(slot)
                offset = slot.stop
        return tuple(slots)

    def initial_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        arrays = {}
        for layer in self.layers:
            for name, array in layer.initial(rng).items():
                arrays[f"{layer.index}.{name}"] = array
        values = ParamVector.zeros(self.layout)
        return values.with_values(arrays)

    def with_params(self, params: ParamVector) -> "Model":
        return Model(self.layers, self.input_shape, self.num_classes, params=params)

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def _layer_params(self, layer: Layer, params: ParamVector) -> dict[str, np.ndarray]:
        prefix = f"{layer.index}."
        return {
            slot.name[len(prefix):]: params.view(slot.name)
            for slot in params.layout
            if slot.name.startswith(prefix)
        }

    def prepare_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if tuple(batch.shape[1:]) == self.input_shape:
            return batch
        if batch.ndim >= 1 and int(np.prod(batch.shape[1:], dtype=np.int64)) == int(np.prod(self.input_shape, dtype=np.int64)):
            return batch.reshape((batch.shape[0],) + self.input_shape)
        first = self.layers[0].label if self.layers else "input"
        raise ShapeMismatchError(
            f"{first}: batch per-sample shape {tuple(batch.shape[1:])} does not match model input {self.input_shape}"
        )

    def forward_pass(self, batch: np.ndarray, training: bool = False) -> ForwardPass:
        x = self.prepare_batch(batch)
        inputs = x
        caches = []
        state = {}
        for layer in self.layers:
            p = self._layer_params(layer, self.params)
            x, cache, updates = layer.forward(p, x, training)
            caches.append(cache)
            for name, value in updates.items():
                state[f"{layer.index}.{name}"] = value
        return ForwardPass(x, softmax(x), inputs, caches, state, training)

    def backward_pass(self, fp: ForwardPass, d_logits: np.ndarray) -> ParamVector:
        grads = {}
        dy = d_logits
        for layer, cache in zip(reversed(self.layers), reversed(fp.caches)):
            p = self._layer_params(layer, self.params)
            dy, layer_grads = layer.backward(p, cache, dy)
            for name, value in layer_grads.items():
                grads[f"{layer.index}.{name}"] = value
        return ParamVector.zeros(self.layout).with_values(grads)

    def __repr__(self) -> str:
        return f"Model(input={self.input_shape}, classes={self.num_classes}, params={len(self.params)})"


def build_model(
    input_shape: Sequence[int],
    num_classes: int,
    arch: str = "mlp",
    layers: Sequence[dict] | None = None,
    seed: int = 0,
) -> Model:
    """
    Builds a model from a preset name or an explicit list of hidden-layer descriptors.

    A flatten layer is inserted before a leading dense layer on image input and when the
    hidden stack ends with a spatial output; a dense logits layer with ``num_classes`` units
    is always appended.

    Args:
        input_shape (Sequence[int]): Per-sample input shape, e.g. ``(20,)`` or ``(1, 28, 28)``.
        num_classes (int): Number of classes.
        arch (str): Preset name used when ``layers`` is not given.
        layers (Sequence[dict] | None): Explicit hidden-layer descriptors.
        seed (int): Weight initialization seed.

    Returns:
        Model: The initialized model.
    """
    if layers is None:
        if arch not in PRESETS:
            raise ShapeMismatchError(f"unknown architecture preset '{arch}'")
        layers = PRESETS[arch]
    hidden = [layer_from_descriptor(d) for d in layers]
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) > 1 and hidden and isinstance(hidden[0], Dense):
        hidden.insert(0, Flatten())
    shape = input_shape
    for index, layer in enumerate(hidden):
        shape = layer.build(index, shape)
    if len(shape) != 1:
        hidden.append(Flatten())
    hidden.append(Dense(num_classes))
    return Model(hidden, input_shape, num_classes, seed=seed)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def forward(model: Model, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Evaluates the model in inference mode.

    Args:
        model (Model): The model to evaluate.
        batch (np.ndarray): Samples of shape ``(B, *input_shape)``.

    Returns:
        tuple[np.ndarray, np.ndarray]: Logits and their row-wise softmax.

    Raises:
        ShapeMismatchError: If the batch does not fit the first layer.
    """
    fp = model.forward_pass(batch, training=False)
    return fp.logits, fp.probs


def cross_entropy_loss(probs: np.ndarray, labels: Sequence[SoftLabel] | np.ndarray) -> float:
    """
    Mean soft-label cross-entropy ``-sum_i s_i log p_i`` over the batch.

    Args:
        probs (np.ndarray): Row-stochastic predictions, shape ``(B, C)``.
        labels (Sequence[SoftLabel] | np.ndarray): One label per row.

    Returns:
        float: The mean loss.

    Raises:
        LabelError: If the number of labels differs from the number of rows.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = as_label_matrix(labels)
    if targets.shape != probs.shape:
        raise LabelError(f"{targets.shape[0]} labels for {probs.shape[0]} predictions")
    per_row = -(targets * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1)
    return float(per_row.mean())


def loss_and_gradient(
    model: Model,
    batch: np.ndarray,
    labels: Sequence[SoftLabel] | np.ndarray,
    training: bool = True,
    weights: np.ndarray | None = None,
) -> tuple[float, ParamVector, ForwardPass]:
    """
    Loss, weight gradient and forward record of the (optionally sample-weighted) mean cross-entropy.

    ``weights`` scales each sample's term before the batch mean; the default is 1 per sample.
    """
    fp = model.forward_pass(batch, training=training)
    targets = as_label_matrix(labels)
    if targets.shape != fp.probs.shape:
        raise LabelError(f"{targets.shape[0]} labels for {fp.probs.shape[0]} samples")
    count = targets.shape[0]
    w = np.ones(count) if weights is None else np.asarray(weights, dtype=np.float64)
    per_row = -(targets * np.log(np.maximum(fp.probs, PROB_FLOOR))).sum(axis=1)
    loss = float((w * per_row).mean())
    d_logits = (fp.probs * targets.sum(axis=1, keepdims=True) - targets) * (w[:, None] / count)
    return loss, model.backward_pass(fp, d_logits), fp


def backward(model: Model, batch: np.ndarray, labels: Sequence[SoftLabel] | np.ndarray, training: bool = False) -> ParamVector:
    """
    Gradient of the mean cross-entropy with respect to every weight.

    Args:
        model (Model): The model.
        batch (np.ndarray): The input samples.
        labels (Sequence[SoftLabel] | np.ndarray): One label per sample.
        training (bool): Use batch statistics in batch-norm layers. Defaults to False.

    Returns:
        ParamVector: Gradient with the model's layout; non-trainable slots are zero.
    """
    _, grad, _ = loss_and_gradient(model, batch, labels, training=training)
    return grad


def per_sample_loss_gradient(model: Model, x: np.ndarray, label: SoftLabel | np.ndarray) -> ParamVector:
    """
    Gradient of one sample's cross-entropy loss, evaluated in inference mode.

    Args:
        model (Model): The model.
        x (np.ndarray): A single sample of the model's input shape.
        label (SoftLabel | np.ndarray): The sample's training label.

    Returns:
        ParamVector: The per-sample gradient.
    """
    x = np.asarray(x, dtype=np.float64)[None, ...]
    probs = label.probs if isinstance(label, SoftLabel) else np.asarray(label, dtype=np.float64)
    return backward(model, x, probs[None, :], training=False)


def per_sample_gradients(model: Model, samples: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Stacks per-sample gradients (trainable coordinates only) into an ``(n, P)`` matrix."""
    mask = model.params.trainable_mask()
    rows = [
        per_sample_loss_gradient(model, samples[i], labels[i]).values[mask]
        for i in range(samples.shape[0])
    ]
    return np.stack(rows) if rows else np.zeros((0, int(mask.sum())))


def logits_features(model: Model, x: np.ndarray) -> np.ndarray:
    """
    Pre-softmax logits of the model for one sample or a batch.

    Args:
        model (Model): The model.
        x (np.ndarray): One sample or a batch of samples.

    Returns:
        np.ndarray: ``L_w(x)``; a vector for one sample, a matrix for a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = tuple(x.shape) == model.input_shape or x.ndim == len(model.input_shape) and x.size == np.prod(model.input_shape)
    batch = x[None, ...] if single else x
    logits, _ = forward(model, batch)
    return logits[0] if single else logits
