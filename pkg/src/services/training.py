from typing import Callable

import numpy as np

from src.entity.dataset import Dataset
from src.entity.models import Model, forward, loss_and_gradient
from src.entity.optim import OptimizerState, optimizer_step
from src.entity.params import ParamVector
from src.schemas.experiment import OptimizerSpec
from src.services.errors import TrainingDivergedError


def make_optimizer(spec: OptimizerSpec, learning_rate: float | None = None) -> OptimizerState:
    return OptimizerState(
        kind=spec.kind,
        learning_rate=spec.learning_rate if learning_rate is None else learning_rate,
        beta1=spec.beta1,
        beta2=spec.beta2,
        epsilon=spec.epsilon,
    )


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def apply_step(model: Model, optimizer: OptimizerState, grad: ParamVector, state: dict) -> Model:
    """One optimizer update followed by the batch-norm running statistics of the forward pass."""
    params = optimizer_step(optimizer, model.params, grad)
    if state:
        params = params.with_values(state)
    if not np.all(np.isfinite(params.values)):
        raise TrainingDivergedError("parameters became non-finite")
    return model.with_params(params)


def gradient_step(
    model: Model,
    optimizer: OptimizerState,
    samples: np.ndarray,
    labels: np.ndarray,
    scale: float = 1.0,
    weights: np.ndarray | None = None,
) -> tuple[Model, float]:
    loss, grad, fp = loss_and_gradient(model, samples, labels, training=True, weights=weights)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss is {loss}")
    if scale != 1.0:
        grad = grad * scale
    return apply_step(model, optimizer, grad, fp.state), loss * scale


def train(
    model: Model,
    data: Dataset,
    optimizer: OptimizerState,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    on_epoch: Callable[[int, Model], bool] | None = None,
) -> Model:
    """
    Minibatch training on the dataset's current labels.

    Args:
        model (Model): Starting model.
        data (Dataset): Training samples and labels.
        optimizer (OptimizerState): Optimizer, mutated in place.
        epochs (int): Number of passes over the data.
        batch_size (int): Minibatch size.
        rng (np.random.Generator): Shuffling stream.
        on_epoch (Callable[[int, Model], bool] | None): Called after every epoch with the 1-based
            epoch number; returning True stops training.

    Returns:
        Model: The trained model.

    Raises:
        TrainingDivergedError: If the loss or the weights stop being finite.
    """
    for epoch in range(1, epochs + 1):
        for batch in minibatches(len(data), batch_size, rng):
            model, _ = gradient_step(model, optimizer, data.samples[batch], data.labels[batch])
        if on_epoch is not None and on_epoch(epoch, model):
            break
    return model


def predict(model: Model, samples: np.ndarray, batch_size: int = 512) -> np.ndarray:
    if samples.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    chunks = []
    for start in range(0, samples.shape[0], batch_size):
        _, probs = forward(model, samples[start:start + batch_size])
        chunks.append(np.argmax(probs, axis=1))
    return np.concatenate(chunks)
