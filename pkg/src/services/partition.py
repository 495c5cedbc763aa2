from typing import Sequence

import numpy as np
from loguru import logger

from src.entity.dataset import Dataset, Partition
from src.services.errors import PartitionError


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """
    Integer counts proportional to ``proportions`` that sum exactly to ``total``.

    Floors are taken first; the leftover units go to the largest fractional parts, lowest
    index first on ties.
    """
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def sample_proportions(k: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """One draw of client proportions from a symmetric Dirichlet with concentration ``beta``."""
    if beta <= 0:
        raise PartitionError(f"dirichlet beta must be positive, got {beta}")
    return rng.dirichlet(np.full(k, float(beta)))


def partition_iid(ds: Dataset, k: int, seed: int) -> Partition:
    """
    Uniform random split into ``k`` shards.

    Every class is shuffled, the classes are laid end to end and the samples are dealt
    round-robin over a random client order, so shard sizes and per-class counts differ by at
    most one between clients.

    Args:
        ds (Dataset): The training set.
        k (int): Number of clients.
        seed (int): Shuffling seed.

    Returns:
        Partition: The IID partition.

    Raises:
        PartitionError: If ``k`` is not in ``[1, n]``.
    """
    n = len(ds)
    if not 1 <= k <= n:
        raise PartitionError(f"cannot split {n} samples over {k} clients")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(ds.indices_of(c)) for c in range(ds.num_classes)])
    clients = rng.permutation(k)
    owner = clients[np.arange(order.size) % k]
    shards = tuple(np.sort(order[owner == client]) for client in range(k))
    return Partition(shards, "iid")


def partition_dirichlet(ds: Dataset, k: int, beta: float, seed: int) -> Partition:
    """
    Non-IID split: per class, client proportions are drawn from ``Dir_k(beta)``.

    Each class's shuffled indices are cut according to its proportions, converted to counts
    with largest-remainder rounding. Empty shards are allowed and logged.

    Args:
        ds (Dataset): The training set.
        k (int): Number of clients.
        beta (float): Dirichlet concentration; smaller is more imbalanced.
        seed (int): Sampling seed.

    Returns:
        Partition: The Dirichlet partition.

    Raises:
        PartitionError: If ``beta <= 0`` or ``k < 1``.
    """
    if k < 1:
        raise PartitionError(f"need at least one client, got {k}")
    if beta <= 0:
        raise PartitionError(f"dirichlet beta must be positive, got {beta}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        indices = rng.permutation(ds.indices_of(c))
        counts = largest_remainder(sample_proportions(k, beta, rng), indices.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for client in range(k):
            parts[client].append(indices[bounds[client]:bounds[client + 1]])
    shards = tuple(np.sort(np.concatenate(p)).astype(np.int64) for p in parts)
    empty = [client for client, shard in enumerate(shards) if shard.size == 0]
    if empty:
        logger.warning(f"dirichlet(beta={beta}) left clients {empty} without samples")
    return Partition(shards, "dirichlet", float(beta))


def select_malicious(
    clients: int,
    count: int,
    explicit: Sequence[int] | None = None,
    seed: int | None = None,
) -> list[int]:
    """
    Chooses the malicious client ids.

    An explicit list wins; otherwise a seeded random draw when ``seed`` is given, else the
    lowest-indexed ``count`` clients.
    """
    if explicit is not None:
        return sorted(int(c) for c in explicit)
    if count > clients:
        raise PartitionError(f"{count} malicious clients requested, only {clients} exist")
    if seed is not None:
        rng = np.random.default_rng(seed)
        return sorted(int(c) for c in rng.choice(clients, size=count, replace=False))
    return list(range(count))
