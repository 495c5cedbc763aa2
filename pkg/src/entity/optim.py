from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.entity.params import ParamVector
from src.services.errors import LayoutMismatchError


class OptimizerKind(str, Enum):
    sgd = "sgd"
    adam = "adam"


@dataclass
class OptimizerState:
    """
    Single-owner optimizer state.

    Moment buffers are created lazily, zero-filled, on the first step and must always match
    the length of the parameter vector they update.
    """

    kind: OptimizerKind = OptimizerKind.adam
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")

    def fresh(self) -> "OptimizerState":
        """Same hyper-parameters, zeroed moments."""
        return OptimizerState(self.kind, self.learning_rate, self.beta1, self.beta2, self.epsilon)

    def reset(self, size: int) -> None:
        self.step_count = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)


def optimizer_step(state: OptimizerState, params: ParamVector, grad: ParamVector) -> ParamVector:
    """
    Applies one optimizer update and returns the new parameter vector.

    Only trainable slots move; batch-norm running statistics are carried over unchanged.

    Args:
        state (OptimizerState): Optimizer state; Adam moments are updated in place.
        params (ParamVector): Current parameters.
        grad (ParamVector): Gradient with the same layout.

    Returns:
        ParamVector: Updated parameters.

    Raises:
        LayoutMismatchError: If params and grad come from different architectures or the moment buffers have the wrong length.
    """
    params.check_layout(grad)
    mask = params.trainable_mask()
    g = np.where(mask, grad.values, 0.0)
    if state.kind is OptimizerKind.sgd:
        return ParamVector(params.values - state.learning_rate * g, params.layout)

    if state.m is None or state.v is None:
        state.reset(len(params))
    if state.m.size != len(params):
        raise LayoutMismatchError(
            f"optimizer moments hold {state.m.size} values, parameters {len(params)}"
        )
    state.step_count += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step_count)
    v_hat = state.v / (1 - state.beta2 ** state.step_count)
    step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return ParamVector(params.values - np.where(mask, step, 0.0), params.layout)
