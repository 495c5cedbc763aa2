"""Vanilla targeted poisoning: label flipping, explicit boosting and stealthy alternating minimization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from src.entity.dataset import Dataset
from src.entity.labels import hard_classes
from src.entity.models import Model, loss_and_gradient
from src.entity.params import ParamVector
from src.entity.updates import ClientUpdate
from src.schemas.experiment import ExperimentConfig, TrainingSpec
from src.services.errors import AttackError
from src.services.federation import client_rng, local_train
from src.services.training import apply_step, gradient_step, make_optimizer, minibatches

if TYPE_CHECKING:
    from src.services.federation import Client, FederationState


def flip_labels(shard: Dataset, c_src: int, c_tgt: int) -> int:
    """
    Relabels every hard ``c_src`` sample of the shard as hard ``c_tgt``, in place.

    Args:
        shard (Dataset): A malicious client's shard.
        c_src (int): Source class.
        c_tgt (int): Target class.

    Returns:
        int: Number of flipped samples.
    """
    rows = np.flatnonzero(hard_classes(shard.labels) == c_src)
    shard.labels[rows] = 0.0
    shard.labels[rows, c_tgt] = 1.0
    if rows.size == 0:
        logger.warning(f"no samples of source class {c_src} to flip")
    return int(rows.size)


def explicit_boost_update(update: ClientUpdate, boost: float) -> ClientUpdate:
    """Reports ``boost * delta``; flags are preserved."""
    if boost <= 0:
        raise AttackError(f"boost factor must be positive, got {boost}")
    return update.scaled(boost)


def stealth_penalty_gradient(params: ParamVector, global_params: ParamVector, estimate: ParamVector, rho: float) -> ParamVector:
    """Gradient of ``rho * ||(params - global) - estimate||^2`` over the trainable coordinates."""
    delta = params.values - global_params.values - estimate.values
    return ParamVector(np.where(params.trainable_mask(), 2.0 * rho * delta, 0.0), params.layout)


def stealthy_altmin_train(
    model: Model,
    shard: Dataset,
    cfg: TrainingSpec,
    benign_estimate: ParamVector,
    *,
    source_class: int,
    boost: float = 1.0,
    rho: float = 1.0,
    benign_weight: float = 1.0,
    schedule: tuple[int, int] = (1, 1),
    seed: int = 0,
    client_id: int = 0,
    round_id: int = 1,
) -> ClientUpdate:
    """
    Alternating-minimization model poisoning on a label-flipped shard.

    Every minibatch first takes ``schedule[0]`` steps on the boosted cross-entropy of the
    poisoned (true source class) samples, then ``schedule[1]`` steps on the benign
    cross-entropy of the remaining samples plus the distance penalty
    ``rho * ||delta - benign_estimate||^2``. A phase with nothing to minimize is skipped.

    With both stealth weights at zero there is no stealth phase: the poisoning steps use the
    whole flipped batch, poisoned rows weighted by ``boost`` and the others by 1. With
    ``boost=1`` and a ``(1, k)`` schedule this is exactly ``local_train`` on the flipped shard.

    Args:
        model (Model): The broadcast global model.
        shard (Dataset): The malicious shard, already flipped.
        cfg (TrainingSpec): Local epochs, batch size and optimizer.
        benign_estimate (ParamVector): Proxy of a benign update (the previous global update).
        source_class (int): Source class of the attack.
        boost (float): Weight of the poisoning loss.
        rho (float): Weight of the distance penalty.
        benign_weight (float): Weight of the benign loss.
        schedule (tuple[int, int]): Poisoning and stealth steps per minibatch.
        seed (int): Run seed.
        client_id (int): Client id.
        round_id (int): Round number.

    Returns:
        ClientUpdate: The malicious update, flagged malicious.
    """
    model.params.check_layout(benign_estimate)
    poisoned = shard.targets == source_class
    if not poisoned.any():
        logger.warning(f"client {client_id} holds no flipped samples, training benignly")
        return local_train(model, shard, cfg, seed=seed, client_id=client_id, round_id=round_id, malicious=True)

    poison_steps, stealth_steps = schedule
    stealthy = benign_weight != 0 or rho != 0
    global_params = model.params
    optimizer = make_optimizer(cfg.optimizer)
    rng = client_rng(seed, client_id, round_id)
    current = model
    for _ in range(cfg.local_epochs):
        for batch in minibatches(len(shard), cfg.batch_size, rng):
            if not stealthy:
                weights = None if boost == 1.0 else np.where(poisoned[batch], boost, 1.0)
                for _ in range(poison_steps):
                    current, _ = gradient_step(
                        current, optimizer, shard.samples[batch], shard.labels[batch], weights=weights
                    )
                continue
            attack_rows = batch[poisoned[batch]]
            clean_rows = batch[~poisoned[batch]]
            if attack_rows.size:
                for _ in range(poison_steps):
                    current, _ = gradient_step(
                        current, optimizer, shard.samples[attack_rows], shard.labels[attack_rows], scale=boost
                    )
            for _ in range(stealth_steps):
                grad = stealth_penalty_gradient(current.params, global_params, benign_estimate, rho)
                state = {}
                if clean_rows.size and benign_weight > 0:
                    _, benign_grad, fp = loss_and_gradient(
                        current, shard.samples[clean_rows], shard.labels[clean_rows], training=True
                    )
                    grad = grad + benign_grad * benign_weight
                    state = fp.state
                current = apply_step(current, optimizer, grad, state)
    return ClientUpdate(client_id, current.params - global_params, len(shard), True)


@dataclass(frozen=True)
class AttackPlan:
    """Who attacks, how, and from which round."""

    kind: str
    source_class: int
    target_class: int
    malicious_clients: tuple[int, ...]
    boost_factor: float = 1.0
    stealth_rho: float = 1.0
    stealth_benign_weight: float = 1.0
    altmin_schedule: tuple[int, int] = (1, 1)
    start_round: int = 1

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, malicious_clients) -> "AttackPlan":
        attack = cfg.attack
        if attack is None or not attack.active:
            raise AttackError("the configuration has no active attack")
        if not malicious_clients:
            raise AttackError("an active attack needs at least one malicious client")
        return cls(
            kind=attack.kind,
            source_class=attack.source_class,
            target_class=attack.target_class,
            malicious_clients=tuple(sorted(malicious_clients)),
            boost_factor=cfg.boost_factor(),
            stealth_rho=attack.stealth_rho,
            stealth_benign_weight=attack.stealth_benign_weight,
            altmin_schedule=tuple(attack.altmin_schedule),
            start_round=attack.start_round,
        )

    def active_in(self, round_id: int) -> bool:
        return round_id >= self.start_round

    def malicious_update(self, state: FederationState, client: Client, shard: Dataset) -> ClientUpdate:
        """The update a malicious client reports once the attack is running."""
        common = dict(seed=state.seed, client_id=client.client_id, round_id=state.round)
        if self.kind == "stealthy_altmin":
            return stealthy_altmin_train(
                state.model,
                shard,
                state.training,
                state.benign_estimate(),
                source_class=self.source_class,
                boost=self.boost_factor,
                rho=self.stealth_rho,
                benign_weight=self.stealth_benign_weight,
                schedule=self.altmin_schedule,
                **common,
            )
        update = local_train(state.model, shard, state.training, malicious=True, **common)
        if self.kind == "explicit_boost":
            return explicit_boost_update(update, self.boost_factor)
        return update
