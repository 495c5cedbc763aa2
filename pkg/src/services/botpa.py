"""
Boosting stage of the targeted poisoning attack.

The attacker flips the source labels of the malicious shards, trains a centralized surrogate on
that contaminated data, picks the intermediate classes whose training contribution most
resembles the source class, and relabels their samples with soft labels that lean towards the
target class in proportion to their logits-layer similarity with the source class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from src.entity.dataset import Dataset
from src.entity.labels import SoftLabel
from src.entity.models import Model, build_model, logits_features, per_sample_gradients, per_sample_loss_gradient
from src.entity.optim import OptimizerKind, OptimizerState
from src.schemas.experiment import BotpaSpec, ModelSpec
from src.services.errors import BotpaError
from src.services.training import predict, train

NORM_FLOOR = 1e-12


@dataclass
class ClassSimilarityMatrix:
    kind: str
    scores: np.ndarray
    checkpoint: int | None = None

    def score(self, c1: int, c2: int) -> float:
        return float(self.scores[c1, c2])

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"kind": self.kind, "c1": c1, "c2": c2, "score": self.scores[c1, c2], "checkpoint": self.checkpoint}
            for c1 in range(self.scores.shape[0])
            for c2 in range(self.scores.shape[1])
        ]
        return pd.DataFrame(rows, columns=["kind", "c1", "c2", "score", "checkpoint"])


@dataclass
class AmplifierSet:
    classes: list[int]
    crafted_labels: dict[int, SoftLabel]
    sample_indices: dict[int, np.ndarray] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for c in self.classes:
            row = {"class": c}
            row.update({f"label_{j}": p for j, p in enumerate(self.crafted_labels[c].probs)})
            rows.append(row)
        return pd.DataFrame(rows)


@dataclass
class SurrogateResult:
    checkpoint: Model
    converged: Model
    checkpoint_epoch: int
    epochs_run: int


@dataclass
class RelabelReport:
    relabeled: dict[int, int]
    modified: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.relabeled.values())


def build_surrogate(surrogate: ModelSpec, fl_model: ModelSpec, input_shape, num_classes: int, seed: int) -> Model:
    """Surrogate architecture: the federated model for ``identical``, else a preset or explicit layers."""
    spec = fl_model if surrogate.arch == "identical" and surrogate.layers is None else surrogate
    return build_model(input_shape, num_classes, arch=spec.arch, layers=spec.descriptors(), seed=seed)


def train_surrogate(
    data: Dataset,
    model: Model,
    cfg: BotpaSpec,
    batch_size: int = 64,
    seed: int = 0,
) -> SurrogateResult:
    """
    Centralized training on the contaminated malicious data.

    Args:
        data (Dataset): Union of the label-flipped malicious shards.
        model (Model): Freshly initialized surrogate.
        cfg (BotpaSpec): Epoch count, checkpoint epoch, learning rate and optional early stopping.
        batch_size (int): Minibatch size.
        seed (int): Shuffling seed.

    Returns:
        SurrogateResult: The checkpoint taken at ``contrib_checkpoint_epoch`` (or at the early-stop
        epoch when training stops before it) and the final model.

    Raises:
        BotpaError: If there is no data.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    if len(data) == 0:
        raise BotpaError("the malicious clients hold no data to train a surrogate on")
    wanted = cfg.contrib_checkpoint_epoch or math.ceil(cfg.surrogate_epochs / 2)
    snapshots: dict[str, Model] = {}
    reached = 0
    assigned = np.argmax(data.labels, axis=1)

    def on_epoch(epoch: int, current: Model) -> bool:
        nonlocal reached
        reached = epoch
        if epoch == wanted:
            snapshots["checkpoint"] = current
        if cfg.early_stop_accuracy is not None:
            accuracy = float(np.mean(predict(current, data.samples) == assigned))
            if accuracy >= cfg.early_stop_accuracy:
                logger.info(f"surrogate reached training accuracy {accuracy:.3f} at epoch {epoch}")
                snapshots.setdefault("checkpoint", current)
                return True
        return False

    optimizer = OptimizerState(kind=OptimizerKind.adam, learning_rate=cfg.learning_rate)
    converged = train(model, data, optimizer, cfg.surrogate_epochs, batch_size, np.random.default_rng(seed), on_epoch)
    checkpoint_epoch = min(wanted, reached)
    return SurrogateResult(snapshots.get("checkpoint", converged), converged, checkpoint_epoch, reached)


def _cosine(a: np.ndarray, b: np.ndarray, what: str) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        logger.warning(f"zero-norm {what}, similarity set to 0")
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def is_contrib(model: Model, x: np.ndarray, label_x, x2: np.ndarray, label_x2) -> float:
    """
    Cosine similarity of the per-sample loss gradients of two samples.

    Args:
        model (Model): The mid-training surrogate.
        x (np.ndarray): First sample.
        label_x: Its training label.
        x2 (np.ndarray): Second sample.
        label_x2: Its training label.

    Returns:
        float: Similarity in [-1, 1]; 0 when either gradient vanishes.
    """
    mask = model.params.trainable_mask()
    g1 = per_sample_loss_gradient(model, x, label_x).values[mask]
    g2 = per_sample_loss_gradient(model, x2, label_x2).values[mask]
    return _cosine(g1, g2, "gradient")


def is_ftrs(model: Model, x: np.ndarray, x2: np.ndarray) -> float:
    """Cosine similarity of the logits-layer representations of two samples."""
    return _cosine(logits_features(model, x), logits_features(model, x2), "feature vector")


def capped_indices(data: Dataset, class_id: int, cap: int | None, seed: int) -> np.ndarray:
    """True-class members, subsampled without replacement to ``cap`` with a class-specific seed."""
    members = data.indices_of(class_id)
    if cap is not None and members.size > cap:
        rng = np.random.default_rng([seed, class_id])
        members = np.sort(rng.choice(members, size=cap, replace=False))
    return members


def _unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    small = norms[:, 0] < NORM_FLOOR
    if small.any():
        logger.warning(f"{int(small.sum())} zero-norm {what}, their similarities are set to 0")
    return np.where(small[:, None], 0.0, matrix / np.where(small[:, None], 1.0, norms))


def _class_mean_unit(model: Model, data: Dataset, class_id: int, kind: str, cap: int | None, seed: int) -> np.ndarray:
    members = capped_indices(data, class_id, cap, seed)
    if members.size == 0:
        raise BotpaError(f"class {class_id} has no samples")
    if kind == "contrib":
        rows = per_sample_gradients(model, data.samples[members], data.labels[members])
        return _unit_rows(rows, "gradients").mean(axis=0)
    return _unit_rows(logits_features(model, data.samples[members]), "feature vectors").mean(axis=0)


def cs_contrib(model: Model, data: Dataset, c1: int, c2: int, cap: int | None = None, seed: int = 0) -> float:
    """
    Mean pairwise gradient similarity between the samples of two classes.

    The mean of pairwise cosines equals the dot product of the two class means of unit
    gradients, which is how it is computed.

    Raises:
        BotpaError: If either class has no samples.
    """
    a = _class_mean_unit(model, data, c1, "contrib", cap, seed)
    b = a if c1 == c2 else _class_mean_unit(model, data, c2, "contrib", cap, seed)
    return float(np.dot(a, b))


def cs_ftrs(model: Model, data: Dataset, c1: int, c2: int, cap: int | None = None, seed: int = 0) -> float:
    """Mean pairwise logits-feature similarity between the samples of two classes."""
    a = _class_mean_unit(model, data, c1, "ftrs", cap, seed)
    b = a if c1 == c2 else _class_mean_unit(model, data, c2, "ftrs", cap, seed)
    return float(np.dot(a, b))


def class_similarity_matrix(
    model: Model, data: Dataset, kind: str, cap: int | None = None, seed: int = 0, checkpoint: int | None = None
) -> ClassSimilarityMatrix:
    """
    Similarity between every pair of classes; rows and columns of absent classes are NaN.

    Args:
        model (Model): Mid-training surrogate for ``contrib``, converged surrogate for ``ftrs``.
        data (Dataset): Contaminated malicious data grouped by true class.
        kind (str): ``contrib`` or ``ftrs``.
        cap (int | None): Samples per class.
        seed (int): Subsampling seed.
        checkpoint (int | None): Epoch of the model, stored with the matrix.

    Returns:
        ClassSimilarityMatrix: The symmetric score matrix.
    """
    if kind not in ("contrib", "ftrs"):
        raise BotpaError(f"unknown similarity kind '{kind}'")
    means = []
    present = []
    for c in range(data.num_classes):
        if data.indices_of(c).size:
            means.append(_class_mean_unit(model, data, c, kind, cap, seed))
            present.append(c)
    scores = np.full((data.num_classes, data.num_classes), np.nan)
    if present:
        stacked = np.stack(means)
        block = stacked @ stacked.T
        scores[np.ix_(present, present)] = np.clip((block + block.T) / 2.0, -1.0, 1.0)
    return ClassSimilarityMatrix(kind, scores, checkpoint)


def rank_intermediate(matrix: ClassSimilarityMatrix, c_src: int, c_tgt: int, n: int) -> list[int]:
    """Top-``n`` classes by similarity with the source, highest first, lowest class id on ties."""
    num_classes = matrix.scores.shape[0]
    if num_classes < 3:
        raise BotpaError(f"need at least 3 classes to pick intermediate ones, got {num_classes}")
    candidates = [
        c for c in range(num_classes) if c not in (c_src, c_tgt) and not np.isnan(matrix.scores[c_src, c])
    ]
    if len(candidates) < n:
        raise BotpaError(f"only {len(candidates)} candidate intermediate classes for N={n}")
    ranked = sorted(candidates, key=lambda c: (-matrix.scores[c_src, c], c))[:n]
    negative = [c for c in ranked if matrix.scores[c_src, c] <= 0]
    if negative:
        logger.warning(f"intermediate classes {negative} have non-positive similarity with the source")
    return ranked


def select_intermediate_classes(
    model_mid: Model, data: Dataset, c_src: int, c_tgt: int, n: int, cap: int | None = None, seed: int = 0
) -> list[int]:
    """
    Picks the ``n`` classes whose gradient contribution is most similar to the source class.

    Args:
        model_mid (Model): Surrogate checkpoint taken before convergence.
        data (Dataset): Contaminated malicious data.
        c_src (int): Source class.
        c_tgt (int): Target class.
        n (int): Number of intermediate classes.
        cap (int | None): Samples per class used for the similarity.
        seed (int): Subsampling seed.

    Returns:
        list[int]: Selected class ids, most similar first.

    Raises:
        BotpaError: With fewer than 3 classes or fewer than ``n`` candidates.
    """
    if data.num_classes < 3:
        raise BotpaError(f"need at least 3 classes to pick intermediate ones, got {data.num_classes}")
    if data.indices_of(c_src).size == 0:
        raise BotpaError(f"the malicious data has no samples of source class {c_src}")
    scores = np.full((data.num_classes, data.num_classes), np.nan)
    for c in range(data.num_classes):
        if c not in (c_src, c_tgt) and data.indices_of(c).size:
            scores[c_src, c] = scores[c, c_src] = cs_contrib(model_mid, data, c_src, c, cap, seed)
    return rank_intermediate(ClassSimilarityMatrix("contrib", scores), c_src, c_tgt, n)


def random_intermediate_classes(num_classes: int, c_src: int, c_tgt: int, n: int, seed: int) -> list[int]:
    """Uniformly drawn intermediate classes, the baseline for the similarity-driven choice."""
    candidates = [c for c in range(num_classes) if c not in (c_src, c_tgt)]
    if len(candidates) < n:
        raise BotpaError(f"only {len(candidates)} candidate intermediate classes for N={n}")
    rng = np.random.default_rng(seed)
    return [int(c) for c in rng.choice(candidates, size=n, replace=False)]


def craft_soft_label(cs: float, c_z: int, c_tgt: int, num_classes: int) -> SoftLabel:
    """
    Soft label of an intermediate class.

    A non-positive similarity keeps the hard label of ``c_z``; otherwise the label puts ``cs``
    on the target class and ``1 - cs`` on ``c_z``.

    Args:
        cs (float): Feature similarity between the source class and ``c_z``, in [-1, 1].
        c_z (int): Intermediate class.
        c_tgt (int): Target class.
        num_classes (int): Number of classes.

    Returns:
        SoftLabel: The crafted label.

    Raises:
        BotpaError: If ``c_z == c_tgt`` or ``cs`` is outside [-1, 1].
    """
    if c_z == c_tgt:
        raise BotpaError("the intermediate class cannot be the target class")
    if not -1.0 - 1e-12 <= cs <= 1.0 + 1e-12 or math.isnan(cs):
        raise BotpaError(f"similarity {cs} outside [-1, 1]")
    cs = min(cs, 1.0)
    if cs <= 0:
        return SoftLabel.hard(c_z, num_classes)
    probs = np.zeros(num_classes)
    probs[c_tgt] = cs
    probs[c_z] = 1.0 - cs
    return SoftLabel(probs)


def amplifier_indices(shards: Mapping[int, Dataset], classes: Sequence[int]) -> dict[int, np.ndarray]:
    """Shard-local indices of the Amplifier samples, per malicious client."""
    wanted = np.asarray(list(classes), dtype=np.int64)
    return {client: np.flatnonzero(np.isin(shard.targets, wanted)) for client, shard in shards.items()}


def apply_botpa(shards: Mapping[int, Dataset], amplifier: AmplifierSet) -> RelabelReport:
    """
    Gives every Amplifier sample of the malicious shards its class's crafted label, in place.

    Args:
        shards (Mapping[int, Dataset]): Malicious shards by client id, already label-flipped.
        amplifier (AmplifierSet): Selected classes and their crafted labels.

    Returns:
        RelabelReport: Relabeled and actually modified sample counts per client.
    """
    relabeled, modified = {}, {}
    for client, shard in shards.items():
        relabeled[client] = modified[client] = 0
        for c in amplifier.classes:
            rows = np.flatnonzero(shard.targets == c)
            if not rows.size:
                continue
            target = amplifier.crafted_labels[c].probs
            modified[client] += int(np.sum(np.any(shard.labels[rows] != target, axis=1)))
            shard.labels[rows] = target
            relabeled[client] += int(rows.size)
    return RelabelReport(relabeled, modified)


def select_n_sweep(values: Sequence[int], runner: Callable[[int], float | None]) -> int:
    """
    Grows N while the relative ASR increase strictly improves.

    Args:
        values (Sequence[int]): Increasing candidate values of N.
        runner (Callable[[int], float | None]): Runs an experiment for one N and returns its RI-ASR
            (None when undefined).

    Returns:
        int: The last N before the first non-increase, or the largest value.
    """
    values = list(values)
    if not values:
        raise BotpaError("no candidate values for N")
    chosen, best = values[0], runner(values[0])
    for n in values[1:]:
        score = runner(n)
        if best is None or score is None or score <= best:
            if score is not None and best is not None and score == best:
                logger.warning(f"RI-ASR flat at N={n}, keeping N={chosen}")
            break
        chosen, best = n, score
    logger.info(f"selected N={chosen}")
    return chosen


@dataclass
class BotpaOutcome:
    amplifier: AmplifierSet
    contrib: ClassSimilarityMatrix
    ftrs: ClassSimilarityMatrix
    report: RelabelReport
    surrogate: SurrogateResult


def boost_shards(
    shards: Mapping[int, Dataset],
    cfg: BotpaSpec,
    fl_model: ModelSpec,
    c_src: int,
    c_tgt: int,
    batch_size: int,
    seed: int,
) -> BotpaOutcome:
    """
    Runs the whole boosting stage on label-flipped malicious shards and relabels them in place.

    Args:
        shards (Mapping[int, Dataset]): Malicious shards by client id, already flipped.
        cfg (BotpaSpec): Boosting parameters.
        fl_model (ModelSpec): Federated model, used when the surrogate is ``identical``.
        c_src (int): Source class.
        c_tgt (int): Target class.
        batch_size (int): Surrogate minibatch size.
        seed (int): Seed when ``cfg.seed`` is unset.

    Returns:
        BotpaOutcome: Amplifier set, both similarity matrices, relabel report and surrogate details.
    """
    seed = cfg.seed if cfg.seed is not None else seed
    contaminated = Dataset.concat(list(shards.values()))
    surrogate = build_surrogate(cfg.surrogate, fl_model, contaminated.input_shape, contaminated.num_classes, seed)
    result = train_surrogate(contaminated, surrogate, cfg, batch_size, seed)
    cap = cfg.per_class_sample_cap
    contrib = class_similarity_matrix(result.checkpoint, contaminated, "contrib", cap, seed, result.checkpoint_epoch)
    ftrs = class_similarity_matrix(result.converged, contaminated, "ftrs", cap, seed, result.epochs_run)
    if cfg.amplifier_strategy == "random":
        classes = random_intermediate_classes(contaminated.num_classes, c_src, c_tgt, cfg.num_intermediate, seed)
    else:
        classes = rank_intermediate(contrib, c_src, c_tgt, cfg.num_intermediate)
    crafted = {}
    for c in classes:
        cs = ftrs.score(c_src, c)
        if math.isnan(cs):
            logger.warning(f"class {c} is absent from the malicious data, keeping its hard label")
            cs = 0.0
        crafted[c] = craft_soft_label(cs, c, c_tgt, contaminated.num_classes)
    amplifier = AmplifierSet(classes, crafted, amplifier_indices(shards, classes))
    report = apply_botpa(shards, amplifier)
    logger.info(f"amplifier classes {classes}, {report.total} samples relabeled")
    return BotpaOutcome(amplifier, contrib, ftrs, report, result)
