from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.entity.labels import one_hot
from src.services.errors import LabelError, ShapeMismatchError


@dataclass
class Dataset:
    """
    Samples with their true classes and their current training labels.

    ``targets`` never changes after construction; ``labels`` is the ``(n, num_classes)`` matrix
    the model is trained on and is what the attacks rewrite.
    """

    samples: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = self.samples.shape[0]
        if self.targets.size != n or self.labels.shape != (n, self.num_classes):
            raise ShapeMismatchError(
                f"{n} samples, {self.targets.size} targets and labels of shape {self.labels.shape}"
            )
        if n and (self.targets.min() < 0 or self.targets.max() >= self.num_classes):
            raise LabelError(f"class ids must lie in [0, {self.num_classes})")

    @classmethod
    def from_classes(cls, samples: np.ndarray, classes: np.ndarray, num_classes: int) -> "Dataset":
        classes = np.asarray(classes, dtype=np.int64)
        return cls(samples, classes, one_hot(classes, num_classes), num_classes)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def indices_of(self, true_class: int) -> np.ndarray:
        return np.flatnonzero(self.targets == true_class)

    def subset(self, indices) -> "Dataset":
        """An independent copy restricted to ``indices``."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.samples[indices].copy(),
            self.targets[indices].copy(),
            self.labels[indices].copy(),
            self.num_classes,
        )

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ShapeMismatchError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
        )


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client index arrays whose union is the full index set."""

    shards: tuple[np.ndarray, ...]
    scheme: str = "iid"
    beta: float | None = None

    def __len__(self) -> int:
        return len(self.shards)

    def sizes(self) -> list[int]:
        return [int(shard.size) for shard in self.shards]
