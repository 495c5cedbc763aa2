"""
Executable checks of the weight-divergence formulas for one full-batch gradient step.

Both checks compare the difference between two plain gradient-descent steps taken from the
same weights (the empirical divergence) with the closed form expressed through per-sample
log-probability gradients (the analytic divergence).
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from loguru import logger

from src.entity.dataset import Dataset
from src.entity.labels import hard_classes, one_hot
from src.entity.models import Model, build_model, loss_and_gradient, per_sample_gradients
from src.entity.optim import OptimizerKind, OptimizerState, optimizer_step
from src.entity.params import ParamVector
from src.services.errors import MetricError

DEFAULT_TOLERANCE = 1e-6


@dataclass
class DivergenceReport:
    empirical: ParamVector
    analytic: ParamVector
    max_abs_error: float
    rel_error: float

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_abs_error < tolerance


def gd_step(model: Model, samples: np.ndarray, labels: np.ndarray, eta: float) -> ParamVector:
    """One full-batch plain gradient-descent step on the mean cross-entropy, inference-mode batch norm."""
    _, grad, _ = loss_and_gradient(model, samples, labels, training=False)
    return optimizer_step(OptimizerState(kind=OptimizerKind.sgd, learning_rate=eta), model.params, grad)


def _report(model: Model, empirical: ParamVector, analytic_values: np.ndarray) -> DivergenceReport:
    analytic = ParamVector.zeros(model.layout)
    analytic.values[model.params.trainable_mask()] = analytic_values
    gap = empirical.values - analytic.values
    max_abs = float(np.max(np.abs(gap))) if gap.size else 0.0
    scale = np.linalg.norm(analytic.values)
    rel = float(np.linalg.norm(gap) / scale) if scale > 0 else (0.0 if max_abs == 0 else float("inf"))
    return DivergenceReport(empirical, analytic, max_abs, rel)


def _log_prob_gap(model: Model, samples: np.ndarray, toward: int, away: int) -> np.ndarray:
    """Mean over samples of ``grad log f_toward - grad log f_away`` on the trainable coordinates."""
    n = samples.shape[0]
    classes = model.num_classes
    grad_toward = per_sample_gradients(model, samples, one_hot(np.full(n, toward), classes))
    grad_away = per_sample_gradients(model, samples, one_hot(np.full(n, away), classes))
    return (grad_away - grad_toward).mean(axis=0)


def check_proposition1(model: Model, data: Dataset, c_src: int, c_tgt: int, eta: float) -> DivergenceReport:
    """
    Divergence caused by flipping the source-class labels to the target class.

    Empirical: weights after one step on the flipped labels minus weights after one step on the
    clean labels. Analytic: ``eta * p(y=s) * mean_s(grad log f_r - grad log f_s)``.

    Args:
        model (Model): Starting model.
        data (Dataset): Local data with clean hard labels.
        c_src (int): Source class ``s``.
        c_tgt (int): Target class ``r``.
        eta (float): Learning rate.

    Returns:
        DivergenceReport: Both divergences and their disagreement.
    """
    if len(data) == 0:
        raise MetricError("the divergence check needs local data")
    clean = data.labels
    source = np.flatnonzero(hard_classes(clean) == c_src)
    flipped = clean.copy()
    flipped[source] = one_hot(np.full(source.size, c_tgt), data.num_classes)
    empirical = gd_step(model, data.samples, flipped, eta) - gd_step(model, data.samples, clean, eta)
    p_source = source.size / len(data)
    if source.size == 0:
        analytic = np.zeros(int(model.params.trainable_mask().sum()))
    else:
        analytic = eta * p_source * _log_prob_gap(model, data.samples[source], c_tgt, c_src)
    return _report(model, empirical, analytic)


def check_proposition2(
    model: Model,
    data: Dataset,
    c_tgt: int,
    c_z: int,
    lambda_z: float,
    eta: float,
    c_src: int | None = None,
) -> DivergenceReport:
    """
    Extra divergence added by soft-labelling intermediate class ``z`` on top of a vanilla attack.

    The vanilla data optionally has its ``c_src`` labels flipped to ``c_tgt``; the boosted data
    additionally gives class-``z`` samples the label ``lambda_z * e_r + (1 - lambda_z) * e_z``.
    Analytic: ``lambda_z * eta * p(y=z) * mean_z(grad log f_r - grad log f_z)``.

    Args:
        model (Model): Starting model.
        data (Dataset): Local data with clean hard labels.
        c_tgt (int): Target class ``r``.
        c_z (int): Intermediate class ``z``.
        lambda_z (float): Soft-label weight on the target class.
        eta (float): Learning rate.
        c_src (int | None): Source class flipped in both runs, if any.

    Returns:
        DivergenceReport: Both divergences and their disagreement.
    """
    if len(data) == 0:
        raise MetricError("the divergence check needs local data")
    if not 0.0 <= lambda_z <= 1.0:
        raise MetricError(f"lambda_z must lie in [0, 1], got {lambda_z}")
    vanilla = data.labels.copy()
    classes = hard_classes(data.labels)
    if c_src is not None:
        source = np.flatnonzero(classes == c_src)
        vanilla[source] = one_hot(np.full(source.size, c_tgt), data.num_classes)
    members = np.flatnonzero(classes == c_z)
    boosted = vanilla.copy()
    soft = np.zeros(data.num_classes)
    soft[c_tgt] += lambda_z
    soft[c_z] += 1.0 - lambda_z
    boosted[members] = soft
    empirical = gd_step(model, data.samples, boosted, eta) - gd_step(model, data.samples, vanilla, eta)
    if members.size == 0:
        analytic = np.zeros(int(model.params.trainable_mask().sum()))
    else:
        p_z = members.size / len(data)
        analytic = lambda_z * eta * p_z * _log_prob_gap(model, data.samples[members], c_tgt, c_z)
    return _report(model, empirical, analytic)


def random_softmax_problem(seed: int, num_classes: int = 4, dim: int = 5, samples: int = 40) -> tuple[Model, Dataset]:
    """A softmax-regression model and Gaussian data with every class present, both drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    classes = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, samples - num_classes)])
    data = Dataset.from_classes(rng.normal(size=(samples, dim)), rng.permutation(classes), num_classes)
    model = build_model((dim,), num_classes, arch="softmax", seed=seed)
    return model, data


def proposition_suite(
    seeds: Sequence[int],
    lambdas: Sequence[float] = (0.0, 0.4, 1.0),
    eta: float = 0.1,
    num_classes: int = 4,
    dim: int = 5,
    samples: int = 40,
    tolerance: float = DEFAULT_TOLERANCE,
) -> pd.DataFrame:
    """
    Runs both divergence checks on random softmax-regression problems.

    Per seed the source, target and intermediate classes are 0, 1 and 2. Besides the plain
    second check for every ``lambda_z``, a row ``reduction`` compares the first check with the
    second one at ``lambda_z = 1`` and ``z = source`` without a prior flip.

    Returns:
        pd.DataFrame: Columns ``seed, proposition, lambda, max_abs_error, rel_error, passed``.
    """
    if num_classes < 3:
        raise MetricError("the divergence suite needs at least three classes")
    c_src, c_tgt, c_z = 0, 1, 2
    rows = []

    def record(seed, name, lam, report):
        rows.append(
            {
                "seed": seed,
                "proposition": name,
                "lambda": lam,
                "max_abs_error": report.max_abs_error,
                "rel_error": report.rel_error,
                "passed": report.passed(tolerance),
            }
        )

    for seed in seeds:
        model, data = random_softmax_problem(seed, num_classes, dim, samples)
        first = check_proposition1(model, data, c_src, c_tgt, eta)
        record(seed, "label_flip", np.nan, first)
        for lam in lambdas:
            record(seed, "soft_label", lam, check_proposition2(model, data, c_tgt, c_z, lam, eta, c_src=c_src))
        reduced = check_proposition2(model, data, c_tgt, c_src, 1.0, eta)
        gap = float(np.max(np.abs(reduced.empirical.values - first.empirical.values)))
        rows.append(
            {
                "seed": seed,
                "proposition": "reduction",
                "lambda": 1.0,
                "max_abs_error": gap,
                "rel_error": np.nan,
                "passed": gap < tolerance,
            }
        )
    logger.info(f"{sum(r['passed'] for r in rows)}/{len(rows)} divergence checks passed")
    return pd.DataFrame(rows)
