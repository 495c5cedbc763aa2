from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.services.errors import ShapeMismatchError

Shape = tuple[int, ...]


class Layer(ABC):
    """
    A differentiable block of the network.

    Layers are stateless with respect to weights: every call receives the weights as a dict
    of arrays (views into the model's ParamVector), so the same layer object can evaluate
    any number of parameter vectors concurrently.
    """

    kind = "layer"

    def __init__(self):
        self.index = -1
        self.input_shape: Shape = ()
        self.output_shape: Shape = ()

    @property
    def label(self) -> str:
        return f"layer {self.index} ({self.kind})"

    def build(self, index: int, input_shape: Shape) -> Shape:
        self.index = index
        self.input_shape = tuple(input_shape)
        self.output_shape = self._output_shape(self.input_shape)
        return self.output_shape

    def _output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def state_shapes(self) -> dict[str, Shape]:
        return {}

    def initial(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def check_input(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"{self.label} expects per-sample shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )

    @abstractmethod
    def forward(self, p: dict[str, np.ndarray], x: np.ndarray, training: bool) -> tuple[np.ndarray, Any, dict]:
        """Returns ``(output, cache, running_state_updates)``."""

    @abstractmethod
    def backward(self, p: dict[str, np.ndarray], cache: Any, dy: np.ndarray) -> tuple[np.ndarray, dict]:
        """Returns ``(input_gradient, parameter_gradients)``."""

    def describe(self) -> dict:
        return {"type": self.kind}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.describe()})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        super().__init__()
        self.units = int(units)

    def _output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 1:
            raise ShapeMismatchError(
                f"{self.label} needs a flat input, got per-sample shape {input_shape}; add a flatten layer"
            )
        return (self.units,)

    def param_shapes(self) -> dict[str, Shape]:
        return {"W": (self.input_shape[0], self.units), "b": (self.units,)}

    def initial(self, rng):
        fan_in = self.input_shape[0]
        return {
            "W": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, self.units)),
            "b": np.zeros(self.units),
        }

    def forward(self, p, x, training):
        self.check_input(x)
        return x @ p["W"] + p["b"], x, {}

    def backward(self, p, cache, dy):
        x = cache
        return dy @ p["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}

    def describe(self):
        return {"type": self.kind, "units": self.units}


class Conv2D(Layer):
    """Stride-1 convolution over NCHW input with ``valid`` or ``same`` padding."""

    kind = "conv2d"

    def __init__(self, filters: int, kernel: int = 3, padding: str = "valid"):
        super().__init__()
        if padding not in ("valid", "same"):
            raise ShapeMismatchError(f"unknown padding '{padding}'")
        if padding == "same" and kernel % 2 == 0:
            raise ShapeMismatchError("same padding needs an odd kernel")
        self.filters = int(filters)
        self.kernel = int(kernel)
        self.padding = padding

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding == "same" else 0

    def _output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise ShapeMismatchError(
                f"{self.label} needs (channels, height, width) input, got {input_shape}"
            )
        _, h, w = input_shape
        out_h = h + 2 * self.pad - self.kernel + 1
        out_w = w + 2 * self.pad - self.kernel + 1
        if out_h < 1 or out_w < 1:
            raise ShapeMismatchError(f"{self.label} kernel {self.kernel} larger than input {input_shape}")
        return (self.filters, out_h, out_w)

    def param_shapes(self):
        channels = self.input_shape[0]
        return {"W": (self.filters, channels, self.kernel, self.kernel), "b": (self.filters,)}

    def initial(self, rng):
        channels = self.input_shape[0]
        fan_in = channels * self.kernel * self.kernel
        return {
            "W": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(self.filters, channels, self.kernel, self.kernel)),
            "b": np.zeros(self.filters),
        }

    def _padded(self, x):
        if not self.pad:
            return x
        pad = self.pad
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def forward(self, p, x, training):
        self.check_input(x)
        xp = self._padded(x)
        windows = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        y = np.einsum("bchwij,fcij->bfhw", windows, p["W"], optimize=True)
        y += p["b"][None, :, None, None]
        return y, (x.shape, windows), {}

    def backward(self, p, cache, dy):
        x_shape, windows = cache
        k = self.kernel
        _, _, out_h, out_w = dy.shape
        d_w = np.einsum("bchwij,bfhw->fcij", windows, dy, optimize=True)
        d_b = dy.sum(axis=(0, 2, 3))
        batch, channels, h, w = x_shape
        dxp = np.zeros((batch, channels, h + 2 * self.pad, w + 2 * self.pad))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + out_h, j:j + out_w] += np.einsum(
                    "bfhw,fc->bchw", dy, p["W"][:, :, i, j], optimize=True
                )
        if self.pad:
            dxp = dxp[:, :, self.pad:-self.pad, self.pad:-self.pad]
        return dxp, {"W": d_w, "b": d_b}

    def describe(self):
        return {"type": self.kind, "filters": self.filters, "kernel": self.kernel, "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def forward(self, p, x, training):
        self.check_input(x)
        mask = x > 0
        return x * mask, mask, {}

    def backward(self, p, cache, dy):
        return dy * cache, {}


class BatchNorm(Layer):
    """
    Batch normalization over features (2-D input) or channels (4-D input).

    Training mode normalizes with batch statistics and reports updated running statistics;
    inference mode uses the running statistics stored in the parameter vector.
    """

    kind = "batchnorm"

    def __init__(self, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = float(momentum)
        self.eps = float(eps)

    @property
    def features(self) -> int:
        return self.input_shape[0]

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _shape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def _output_shape(self, input_shape):
        if len(input_shape) not in (1, 3):
            raise ShapeMismatchError(f"{self.label} supports flat or (C, H, W) input, got {input_shape}")
        return input_shape

    def param_shapes(self):
        return {"gamma": (self.features,), "beta": (self.features,)}

    def state_shapes(self):
        return {"running_mean": (self.features,), "running_var": (self.features,)}

    def initial(self, rng):
        return {
            "gamma": np.ones(self.features),
            "beta": np.zeros(self.features),
            "running_mean": np.zeros(self.features),
            "running_var": np.ones(self.features),
        }

    def forward(self, p, x, training):
        self.check_input(x)
        axes, shape = self._axes(x), self._shape(x)
        gamma, beta = p["gamma"].reshape(shape), p["beta"].reshape(shape)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
            state = {
                "running_mean": (1 - self.momentum) * p["running_mean"] + self.momentum * mean,
                "running_var": (1 - self.momentum) * p["running_var"] + self.momentum * var,
            }
            return gamma * x_hat + beta, (True, x_hat, inv_std), state
        inv_std = 1.0 / np.sqrt(p["running_var"] + self.eps)
        x_hat = (x - p["running_mean"].reshape(shape)) * inv_std.reshape(shape)
        return gamma * x_hat + beta, (False, x_hat, inv_std), {}

    def backward(self, p, cache, dy):
        training, x_hat, inv_std = cache
        axes, shape = self._axes(dy), self._shape(dy)
        grads = {"gamma": (dy * x_hat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        d_xhat = dy * p["gamma"].reshape(shape)
        if not training:
            return d_xhat * inv_std.reshape(shape), grads
        count = dy.size // self.features
        dx = (
            count * d_xhat
            - d_xhat.sum(axis=axes, keepdims=True)
            - x_hat * (d_xhat * x_hat).sum(axis=axes, keepdims=True)
        ) * (inv_std.reshape(shape) / count)
        return dx, grads

    def describe(self):
        return {"type": self.kind, "momentum": self.momentum}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = int(size)

    def _output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"{self.label} needs (channels, height, width) input, got {input_shape}")
        channels, h, w = input_shape
        if h < self.size or w < self.size:
            raise ShapeMismatchError(f"{self.label} window {self.size} larger than input {input_shape}")
        return (channels, h // self.size, w // self.size)

    def forward(self, p, x, training):
        self.check_input(x)
        s = self.size
        batch, channels, _, _ = x.shape
        _, out_h, out_w = self.output_shape
        blocks = x[:, :, :out_h * s, :out_w * s].reshape(batch, channels, out_h, s, out_w, s)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, out_h, out_w, s * s)
        winner = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]
        return y, (x.shape, winner), {}

    def backward(self, p, cache, dy):
        x_shape, winner = cache
        s = self.size
        batch, channels, out_h, out_w = dy.shape
        blocks = np.zeros((batch, channels, out_h, out_w, s * s))
        np.put_along_axis(blocks, winner[..., None], dy[..., None], axis=-1)
        blocks = blocks.reshape(batch, channels, out_h, out_w, s, s).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, :out_h * s, :out_w * s] = blocks.reshape(batch, channels, out_h * s, out_w * s)
        return dx, {}

    def describe(self):
        return {"type": self.kind, "size": self.size}


class Flatten(Layer):
    kind = "flatten"

    def _output_shape(self, input_shape):
        return (int(np.prod(input_shape, dtype=np.int64)),)

    def forward(self, p, x, training):
        self.check_input(x)
        return x.reshape(x.shape[0], -1), x.shape, {}

    def backward(self, p, cache, dy):
        return dy.reshape(cache), {}


LAYER_TYPES: dict[str, type[Layer]] = {
    Dense.kind: Dense,
    Conv2D.kind: Conv2D,
    ReLU.kind: ReLU,
    BatchNorm.kind: BatchNorm,
    MaxPool2D.kind: MaxPool2D,
    Flatten.kind: Flatten,
}


def layer_from_descriptor(descriptor: dict) -> Layer:
    """
    Builds a layer from a descriptor such as ``{"type": "dense", "units": 64}``.

    Args:
        descriptor (dict): Layer type plus its keyword arguments.

    Returns:
        Layer: The unbuilt layer.

    Raises:
        ShapeMismatchError: If the layer type is unknown.
    """
    descriptor = dict(descriptor)
    kind = descriptor.pop("type")
    try:
        layer_cls = LAYER_TYPES[kind]
    except KeyError:
        raise ShapeMismatchError(f"unknown layer type '{kind}'")
    return layer_cls(**{k: v for k, v in descriptor.items() if v is not None})
