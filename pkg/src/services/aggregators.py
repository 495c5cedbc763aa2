"""Robust aggregation rules over client updates."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from loguru import logger
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform

from src.entity.params import ParamVector
from src.entity.updates import ClientUpdate
from src.schemas.experiment import AggregatorSpec
from src.services.errors import AggregationError

NORM_FLOOR = 1e-12
NORM_OUTLIER_FACTOR = 10.0


@dataclass(frozen=True)
class AggregationResult:
    delta: ParamVector
    selected: list[int] | None = None


def _stack(updates: Sequence[ClientUpdate]) -> tuple[np.ndarray, tuple]:
    if not updates:
        raise AggregationError("no updates to aggregate")
    layout = updates[0].delta.layout
    for update in updates[1:]:
        updates[0].delta.check_layout(update.delta)
    return np.stack([u.delta.values for u in updates]), layout


def fedavg(updates: Sequence[ClientUpdate]) -> ParamVector:
    """
    Sample-size weighted mean of the deltas.

    Args:
        updates (Sequence[ClientUpdate]): Client updates.

    Returns:
        ParamVector: ``sum(n_k * delta_k) / sum(n_k)``.

    Raises:
        AggregationError: If the list is empty or every client reports zero samples.
    """
    stacked, layout = _stack(updates)
    weights = np.array([u.num_samples for u in updates], dtype=np.float64)
    if weights.sum() <= 0:
        raise AggregationError("every update reports zero samples")
    weights /= weights.sum()
    # offsets from the first delta keep the mean of identical deltas exact
    base = stacked[0]
    return ParamVector(base + weights @ (stacked - base), layout)


def krum_scores(stacked: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each update to its ``n - f - 2`` nearest neighbours."""
    n = stacked.shape[0]
    distances = np.stack([((stacked - row) ** 2).sum(axis=1) for row in stacked])
    closest = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(distances[i], i))
        scores[i] = others[:closest].sum()
    return scores


def _check_krum(n: int, f: int) -> None:
    if f < 0 or n < 2 * f + 3:
        raise AggregationError(f"krum needs n >= 2f + 3, got n={n}, f={f}")


def krum(updates: Sequence[ClientUpdate], f: int) -> tuple[int, ParamVector]:
    """
    Selects the single update closest to its neighbours.

    Args:
        updates (Sequence[ClientUpdate]): Client updates.
        f (int): Assumed number of Byzantine clients.

    Returns:
        tuple[int, ParamVector]: Index of the chosen update (lowest index on ties) and its delta.

    Raises:
        AggregationError: If ``n < 2f + 3``.
    """
    stacked, layout = _stack(updates)
    if len(updates) == 1:
        return 0, updates[0].delta.copy()
    _check_krum(len(updates), f)
    scores = krum_scores(stacked, f)
    chosen = int(np.argsort(scores, kind="stable")[0])
    logger.debug(f"krum scores {np.round(scores, 6).tolist()} -> {chosen}")
    return chosen, updates[chosen].delta.copy()


def multi_krum(updates: Sequence[ClientUpdate], f: int, m: int) -> tuple[list[int], ParamVector]:
    """
    Keeps the ``m`` updates with the lowest Krum scores and averages them with FedAvg weights.

    Args:
        updates (Sequence[ClientUpdate]): Client updates.
        f (int): Assumed number of Byzantine clients.
        m (int): Number of updates to keep.

    Returns:
        tuple[list[int], ParamVector]: Sorted selected indices and their weighted mean.

    Raises:
        AggregationError: If ``n < 2f + 3`` or ``m`` is not in ``[1, n]``.
    """
    stacked, _ = _stack(updates)
    n = len(updates)
    if not 1 <= m <= n:
        raise AggregationError(f"multi-krum m={m} outside [1, {n}]")
    if n == 1:
        return [0], updates[0].delta.copy()
    _check_krum(n, f)
    scores = krum_scores(stacked, f)
    selected = sorted(int(i) for i in np.argsort(scores, kind="stable")[:m])
    return selected, fedavg([updates[i] for i in selected])


def coordinate_median(updates: Sequence[ClientUpdate]) -> ParamVector:
    stacked, layout = _stack(updates)
    return ParamVector(np.median(stacked, axis=0), layout)


def trimmed_mean(updates: Sequence[ClientUpdate], trim_fraction: float) -> ParamVector:
    """
    Coordinate-wise mean after dropping ``floor(trim_fraction * n)`` values from each tail.

    Raises:
        AggregationError: If nothing would remain.
    """
    stacked, layout = _stack(updates)
    n = stacked.shape[0]
    cut = int(np.floor(trim_fraction * n + 1e-12))
    if n - 2 * cut < 1:
        raise AggregationError(f"trimming {cut} of {n} values from each side leaves nothing")
    ordered = np.sort(stacked, axis=0)
    return ParamVector(ordered[cut:n - cut].mean(axis=0), layout)


def cosine_distances(stacked: np.ndarray) -> np.ndarray:
    """Pairwise ``1 - cos``; a zero vector is at distance 1 from everything but itself."""
    norms = np.linalg.norm(stacked, axis=1)
    safe = np.where(norms > NORM_FLOOR, norms, 1.0)
    unit = stacked / safe[:, None]
    distances = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    zero = norms <= NORM_FLOOR
    distances[zero, :] = 1.0
    distances[:, zero] = 1.0
    np.fill_diagonal(distances, 0.0)
    return (distances + distances.T) / 2.0


def majority_cluster(stacked: np.ndarray) -> list[int]:
    """
    Majority cluster of a complete-linkage dendrogram over cosine distances.

    The dendrogram is cut in the widest height gap at or above the merge that first forms a
    cluster of at least ``n // 2 + 1`` members; the largest cluster at that cut is kept. When
    the majority only forms in the final merge every update is kept.
    """
    n = stacked.shape[0]
    majority = n // 2 + 1
    merges = linkage(squareform(cosine_distances(stacked), checks=False), method="complete")
    first = int(np.flatnonzero(merges[:, 3] >= majority)[0])
    last = n - 2
    if first == last:
        logger.warning("flame: no majority cluster below the final merge, keeping every update")
        return list(range(n))
    heights = merges[:, 2]
    gaps = heights[first + 1:last + 1] - heights[first:last]
    if gaps.max() <= 0:
        logger.warning("flame: flat dendrogram, keeping every update")
        return list(range(n))
    cut = first + int(np.argmax(gaps))
    members = {i: [i] for i in range(n)}
    for step in range(cut + 1):
        a, b = int(merges[step, 0]), int(merges[step, 1])
        members[n + step] = members.pop(a) + members.pop(b)
    admitted = max(members.values(), key=lambda m: (len(m), -min(m)))
    return sorted(admitted)


def flame_filter(stacked: np.ndarray) -> list[int]:
    """
    Admitted update indices: the cosine majority cluster without its extreme-norm members.

    A scaled copy of a benign delta sits at cosine distance 0 from it, so the cluster alone
    admits it. Members whose norm exceeds ``NORM_OUTLIER_FACTOR`` times the cluster's median
    norm are dropped afterwards; the median member always survives.
    """
    kept = majority_cluster(stacked)
    norms = np.linalg.norm(stacked[kept], axis=1)
    reference = float(np.median(norms))
    if reference <= NORM_FLOOR:
        return kept
    survivors = [i for i, norm in zip(kept, norms) if norm <= NORM_OUTLIER_FACTOR * reference]
    if len(survivors) < len(kept):
        dropped = sorted(set(kept) - set(survivors))
        logger.info(f"flame: dropped {dropped} with norms above {NORM_OUTLIER_FACTOR:g}x the median {reference:.6g}")
    return survivors


def flame(updates: Sequence[ClientUpdate], lambda_noise: float, seed) -> tuple[list[int], ParamVector]:
    """
    Filter, clip and noise.

    Args:
        updates (Sequence[ClientUpdate]): Client updates, at least three.
        lambda_noise (float): Noise multiplier; the noise standard deviation is ``lambda_noise * S``.
        seed: Seed (or seed sequence) of the noise generator.

    Returns:
        tuple[list[int], ParamVector]: Admitted indices and the noised mean of clipped deltas.

    Raises:
        AggregationError: If fewer than three updates are given.
    """
    stacked, layout = _stack(updates)
    n = stacked.shape[0]
    if n < 3:
        raise AggregationError(f"flame needs at least 3 updates, got {n}")
    kept = flame_filter(stacked)
    chosen = stacked[kept]
    norms = np.linalg.norm(chosen, axis=1)
    bound = float(np.median(norms))
    factors = np.where(norms > NORM_FLOOR, np.minimum(1.0, bound / np.where(norms > NORM_FLOOR, norms, 1.0)), 1.0)
    clipped = chosen * factors[:, None]
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, lambda_noise * bound, size=stacked.shape[1]) if lambda_noise > 0 else 0.0
    logger.debug(f"flame kept {kept} with clipping bound {bound:.6g}")
    return kept, ParamVector(clipped.mean(axis=0) + noise, layout)


def aggregate(spec: AggregatorSpec, updates: Sequence[ClientUpdate], seed=0, f_default: int = 0) -> AggregationResult:
    """
    Runs the aggregation rule named by ``spec``.

    Args:
        spec (AggregatorSpec): Aggregator kind and parameters.
        updates (Sequence[ClientUpdate]): Client updates in client order.
        seed: Noise seed for Flame.
        f_default (int): Krum ``f`` when ``spec.f_byzantine`` is unset (the configured attacker count).

    Returns:
        AggregationResult: The global delta, plus selected indices for the selective rules.
    """
    f = f_default if spec.f_byzantine is None else spec.f_byzantine
    if spec.kind == "fedavg":
        return AggregationResult(fedavg(updates))
    if spec.kind == "krum":
        index, delta = krum(updates, f)
        return AggregationResult(delta, [index])
    if spec.kind == "multi_krum":
        m = spec.m_select if spec.m_select is not None else max(1, len(updates) - f)
        selected, delta = multi_krum(updates, f, m)
        return AggregationResult(delta, selected)
    if spec.kind == "median":
        return AggregationResult(coordinate_median(updates))
    if spec.kind == "trimmed_mean":
        return AggregationResult(trimmed_mean(updates, spec.trim_fraction))
    if spec.kind == "flame":
        kept, delta = flame(updates, spec.flame_lambda, seed)
        return AggregationResult(delta, kept)
    raise AggregationError(f"unknown aggregator '{spec.kind}'")
