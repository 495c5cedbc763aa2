"""Server loop of the federated simulation: broadcast, local training, aggregation, metrics."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from loguru import logger

from src.conf.config import config
from src.entity.dataset import Dataset
from src.entity.models import Model
from src.entity.params import ParamVector
from src.entity.updates import ClientUpdate
from src.schemas.experiment import AggregatorSpec, TrainingSpec
from src.schemas.records import RoundRecord
from src.services.aggregators import aggregate
from src.services.errors import ExperimentError, SimulatorError
from src.services.metrics import compute_asr, per_class_accuracy
from src.services.training import make_optimizer, train

if TYPE_CHECKING:
    from src.services.attacks import AttackPlan


def client_rng(seed: int, client_id: int, round_id: int) -> np.random.Generator:
    """Independent stream per (run seed, client, round); equal for serial and parallel runs."""
    return np.random.default_rng([seed, client_id, round_id])


def local_train(
    model: Model,
    shard: Dataset,
    cfg: TrainingSpec,
    *,
    seed: int = 0,
    client_id: int = 0,
    round_id: int = 1,
    malicious: bool = False,
) -> ClientUpdate:
    """
    Trains a fresh copy of the global model on one client's shard.

    The optimizer moments start at zero every round.

    Args:
        model (Model): The broadcast global model.
        shard (Dataset): The client's training data with its current labels.
        cfg (TrainingSpec): Local epochs, batch size and optimizer.
        seed (int): Run seed.
        client_id (int): Client id, part of the shuffling stream.
        round_id (int): Round number, part of the shuffling stream.
        malicious (bool): Flag carried into the update.

    Returns:
        ClientUpdate: ``delta = w_local - w_global``; a zero delta with ``num_samples=0`` for an empty shard.
    """
    if len(shard) == 0:
        logger.warning(f"client {client_id} has an empty shard in round {round_id}, sending a zero update")
        return ClientUpdate(client_id, model.params.zeros_like(), 0, malicious)
    trained = train(
        model,
        shard,
        make_optimizer(cfg.optimizer),
        cfg.local_epochs,
        cfg.batch_size,
        client_rng(seed, client_id, round_id),
    )
    return ClientUpdate(client_id, trained.params - model.params, len(shard), malicious)


@dataclass
class Client:
    """
    One participant. Malicious clients keep their untouched shard in ``clean_shard`` and train
    on it until the attack starts.
    """

    client_id: int
    shard: Dataset
    malicious: bool = False
    clean_shard: Dataset | None = None

    def training_shard(self, attacking: bool) -> Dataset:
        if self.malicious and not attacking and self.clean_shard is not None:
            return self.clean_shard
        return self.shard


@dataclass
class FederationState:
    model: Model
    test_set: Dataset
    training: TrainingSpec
    seed: int = 0
    round: int = 0
    previous_update: ParamVector | None = None
    source_class: int | None = None
    target_class: int | None = None
    f_default: int = 0
    workers: int = 1
    serial: bool = True
    last_updates: list[ClientUpdate] = field(default_factory=list)

    def benign_estimate(self) -> ParamVector:
        if self.previous_update is None:
            return self.model.params.zeros_like()
        return self.previous_update


def _collect_updates(state: FederationState, clients: Sequence[Client], attacks: AttackPlan | None) -> list[ClientUpdate]:
    def work(client: Client) -> ClientUpdate:
        attacking = attacks is not None and client.malicious and attacks.active_in(state.round)
        shard = client.training_shard(attacking)
        if attacking:
            return attacks.malicious_update(state, client, shard)
        return local_train(
            state.model,
            shard,
            state.training,
            seed=state.seed,
            client_id=client.client_id,
            round_id=state.round,
            malicious=client.malicious,
        )

    if state.serial or state.workers <= 1 or len(clients) == 1:
        return [work(client) for client in clients]
    with ThreadPoolExecutor(max_workers=state.workers) as pool:
        return list(pool.map(work, clients))


def run_round(
    state: FederationState,
    clients: Sequence[Client],
    aggregator: AggregatorSpec,
    attacks: AttackPlan | None = None,
) -> RoundRecord:
    """
    Executes one communication round and advances ``state``.

    Args:
        state (FederationState): Global model, round counter and evaluation data; updated in place.
        clients (Sequence[Client]): All participants, in client-id order.
        aggregator (AggregatorSpec): Aggregation rule.
        attacks (AttackPlan | None): Malicious behaviour, if any.

    Returns:
        RoundRecord: Metrics of the new global model, with the selected update indices for selective rules.

    Raises:
        AggregationError: If the rule rejects the updates.
    """
    if not clients:
        raise ExperimentError("a round needs at least one client")
    state.round += 1
    updates = _collect_updates(state, clients, attacks)
    result = aggregate(aggregator, updates, seed=[state.seed, state.round], f_default=state.f_default)
    state.model = state.model.with_params(state.model.params + result.delta)
    state.previous_update = result.delta
    state.last_updates = updates

    accuracy, per_class = per_class_accuracy(state.model, state.test_set)
    asr = None
    if state.source_class is not None and state.target_class is not None:
        asr = compute_asr(state.model, state.test_set, state.source_class, state.target_class)
    malicious_selected = None
    if result.selected is not None:
        malicious_selected = sum(1 for i in result.selected if updates[i].malicious)
    record = RoundRecord(
        round=state.round,
        global_accuracy=accuracy,
        per_class_accuracy=per_class,
        asr=asr,
        selected_update_indices=result.selected,
        malicious_selected=malicious_selected,
        aggregator=aggregator.summary(),
        update_norm=result.delta.norm(),
    )
    asr_text = "-" if asr is None else f"{asr:.3f}"
    logger.info(f"round {state.round}: accuracy {accuracy:.4f}, asr {asr_text}")
    return record


def run_experiment(
    state: FederationState,
    clients: Sequence[Client],
    aggregator: AggregatorSpec,
    attacks: AttackPlan | None = None,
    rounds: int | None = None,
    sink: Callable[[list[RoundRecord]], None] | None = None,
) -> list[RoundRecord]:
    """
    Runs ``rounds`` communication rounds (``state.training.rounds`` by default).

    Args:
        state (FederationState): Initial global model and evaluation data.
        clients (Sequence[Client]): Participants.
        aggregator (AggregatorSpec): Aggregation rule.
        attacks (AttackPlan | None): Malicious behaviour, if any.
        rounds (int | None): Number of rounds.
        sink (Callable[[list[RoundRecord]], None] | None): Receives the records collected so
            far when a round fails, before the error propagates.

    Returns:
        list[RoundRecord]: One record per round.

    Raises:
        ExperimentError: Naming the failed round.
    """
    rounds = state.training.rounds if rounds is None else rounds
    records: list[RoundRecord] = []
    for _ in range(rounds):
        try:
            records.append(run_round(state, clients, aggregator, attacks))
        except SimulatorError as error:
            if sink is not None:
                sink(records)
            raise ExperimentError(f"round {state.round} failed: {error}") from error
    return records


def new_state(model: Model, test_set: Dataset, training: TrainingSpec, seed: int, **kwargs) -> FederationState:
    kwargs.setdefault("workers", config.WORKERS)
    kwargs.setdefault("serial", config.SERIAL)
    return FederationState(model=model, test_set=test_set, training=training, seed=seed, **kwargs)
