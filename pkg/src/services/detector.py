from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy.spatial.distance import pdist

from src.entity.dataset import Dataset
from src.entity.models import Model, logits_features
from src.services.errors import MetricError

EPSILON = 1e-9


@dataclass
class DensityReport:
    """``densities[m, c]`` is model ``m``'s mean pairwise feature distance on class ``c`` (NaN if absent)."""

    densities: np.ndarray
    scores: list[float | None]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for c, score in enumerate(self.scores):
            row = {"class": c, "score": np.nan if score is None else score}
            row.update({f"density_model_{m}": self.densities[m, c] for m in range(self.densities.shape[0])})
            rows.append(row)
        return pd.DataFrame(rows)


def feature_density(model: Model, samples: np.ndarray) -> float:
    """Mean pairwise L2 distance among the logits features; 0 for fewer than two samples."""
    if samples.shape[0] < 2:
        return 0.0
    return float(pdist(logits_features(model, samples)).mean())


def density_divergence(local_models: Sequence[Model], reference_set: Dataset) -> DensityReport:
    """
    Per-class disagreement between local models on how tightly they pack a class.

    For every class the score is the largest pairwise gap between model densities divided by
    the mean density (plus a small epsilon). Classes absent from the reference set get ``None``.

    Args:
        local_models (Sequence[Model]): At least two local models of the same architecture.
        reference_set (Dataset): Held-out samples grouped by true class.

    Returns:
        DensityReport: Densities per model and class, and one score per class.

    Raises:
        MetricError: With fewer than two models.
    """
    if len(local_models) < 2:
        raise MetricError("density divergence needs at least two local models")
    num_classes = reference_set.num_classes
    densities = np.full((len(local_models), num_classes), np.nan)
    scores: list[float | None] = []
    for c in range(num_classes):
        members = reference_set.indices_of(c)
        if members.size == 0:
            logger.warning(f"class {c} is absent from the reference set, no divergence score")
            scores.append(None)
            continue
        column = np.array([feature_density(m, reference_set.samples[members]) for m in local_models])
        densities[:, c] = column
        gap = max(abs(a - b) for a, b in combinations(column, 2))
        scores.append(float(gap / (column.mean() + EPSILON)))
    return DensityReport(densities, scores)


def suspect_models(report: DensityReport, top_classes: int = 1) -> list[tuple[int, float]]:
    """
    Ranks models by their relative density deviation on the highest-scoring classes.

    Scores only; no flagging threshold is applied.

    Args:
        report (DensityReport): Output of ``density_divergence``.
        top_classes (int): Number of highest-scoring classes to consider.

    Returns:
        list[tuple[int, float]]: ``(model_index, deviation)`` pairs, most deviating first.
    """
    scored = [(c, s) for c, s in enumerate(report.scores) if s is not None]
    if not scored:
        raise MetricError("no class has a divergence score")
    classes = [c for c, _ in sorted(scored, key=lambda item: (-item[1], item[0]))[:top_classes]]
    block = report.densities[:, classes]
    reference = np.median(block, axis=0)
    deviation = (np.abs(block - reference) / (reference + EPSILON)).mean(axis=1)
    order = sorted(range(block.shape[0]), key=lambda m: (-deviation[m], m))
    return [(m, float(deviation[m])) for m in order]
