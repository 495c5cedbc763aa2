import math
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from loguru import logger
from sklearn.decomposition import PCA

from src.entity.dataset import Dataset
from src.entity.models import Model, logits_features
from src.schemas.records import RoundRecord
from src.services.errors import MetricError
from src.services.training import predict


def per_class_accuracy(model: Model, test_set: Dataset) -> tuple[float, list[float]]:
    """
    Global and per-class accuracy against the true classes.

    Returns:
        tuple[float, list[float]]: Global accuracy and one accuracy per class (NaN for a class
        without test samples).
    """
    predictions = predict(model, test_set.samples)
    correct = predictions == test_set.targets
    global_accuracy = float(correct.mean()) if correct.size else math.nan
    per_class = []
    for c in range(test_set.num_classes):
        members = test_set.targets == c
        per_class.append(float(correct[members].mean()) if members.any() else math.nan)
    return global_accuracy, per_class


def compute_asr(model: Model, test_set: Dataset, c_src: int, c_tgt: int) -> float:
    """
    Share of source-class test samples classified as the target class.

    Args:
        model (Model): The evaluated model.
        test_set (Dataset): Held-out samples with true classes.
        c_src (int): Source class.
        c_tgt (int): Target class.

    Returns:
        float: The attack success rate in [0, 1].

    Raises:
        MetricError: If the test set has no source-class sample.
    """
    source = test_set.targets == c_src
    if not source.any():
        raise MetricError(f"test set has no samples of source class {c_src}")
    predictions = predict(model, test_set.samples[source])
    return float(np.mean(predictions == c_tgt))


def ri_asr(v_asr: float, b_asr: float) -> float | None:
    """Relative ASR increase ``(b - v) / v``; ``None`` when the vanilla ASR is zero."""
    if v_asr == 0:
        logger.warning("vanilla ASR is zero, RI-ASR is undefined")
        return None
    return (b_asr - v_asr) / v_asr


def windowed_mean(records: Sequence[RoundRecord], from_round: int, to_round: int, field: str) -> float:
    """
    Mean of a record field over the inclusive round window.

    Args:
        records (Sequence[RoundRecord]): Records of one run.
        from_round (int): First round of the window (1-based).
        to_round (int): Last round of the window.
        field (str): Record attribute, e.g. ``asr`` or ``global_accuracy``.

    Returns:
        float: The arithmetic mean.

    Raises:
        MetricError: If the window is empty, outside the recorded rounds, or the field is unset.
    """
    last = max((r.round for r in records), default=0)
    if not 1 <= from_round <= to_round <= last:
        raise MetricError(f"window [{from_round}, {to_round}] outside rounds [1, {last}]")
    values = [getattr(r, field) for r in records if from_round <= r.round <= to_round]
    if any(v is None for v in values):
        raise MetricError(f"field '{field}' is not recorded in every round of the window")
    return float(np.mean(values))


def feature_table(model: Model, samples: Dataset, pca_components: int = 2) -> pd.DataFrame:
    """Logits features per sample plus an optional PCA projection."""
    features = logits_features(model, samples.samples) if len(samples) else np.zeros((0, model.num_classes))
    table = pd.DataFrame(
        {"sample_id": np.arange(len(samples)), "true_class": samples.targets},
    )
    for j in range(features.shape[1]):
        table[f"feature_{j}"] = features[:, j]
    components = min(pca_components, features.shape[0], features.shape[1])
    if components >= 1 and features.shape[0] >= 2:
        projected = PCA(n_components=components).fit_transform(features)
        for j in range(components):
            table[f"pca_{j}"] = projected[:, j]
    return table


def export_logits_features(model: Model, samples: Dataset, out_path: str | Path, pca_components: int = 2) -> Path:
    """
    Writes one CSV row per sample: ``sample_id, true_class, feature_0..feature_{d-1}`` then ``pca_*``.

    Args:
        model (Model): Model whose logits layer is exported.
        samples (Dataset): Samples to project.
        out_path (str | Path): Destination CSV.
        pca_components (int): Number of PCA columns; 0 disables the projection.

    Returns:
        Path: The written file.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    feature_table(model, samples, pca_components).to_csv(out_path, index=False)
    return out_path
