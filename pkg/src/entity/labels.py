from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.services.errors import LabelError

SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SoftLabel:
    """
    Probability vector over classes.

    Hard labels are the one-hot special case; crafted labels are convex combinations of two
    one-hot vectors.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if probs.size == 0:
            raise LabelError("a label needs at least one class")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise LabelError("label entries must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > SUM_TOLERANCE:
            raise LabelError(f"label entries sum to {probs.sum()!r}, expected 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def hard(cls, class_id: int, num_classes: int) -> "SoftLabel":
        if not 0 <= class_id < num_classes:
            raise LabelError(f"class {class_id} outside [0, {num_classes})")
        probs = np.zeros(num_classes)
        probs[class_id] = 1.0
        return cls(probs)

    @property
    def num_classes(self) -> int:
        return self.probs.size

    @property
    def is_hard(self) -> bool:
        return int(np.count_nonzero(self.probs == 1.0)) == 1

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SoftLabel):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())


def one_hot(classes: Sequence[int] | np.ndarray, num_classes: int) -> np.ndarray:
    """Hard label matrix for integer class ids."""
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((classes.size, num_classes))
    out[np.arange(classes.size), classes] = 1.0
    return out


def as_label_matrix(labels: Sequence[SoftLabel] | np.ndarray) -> np.ndarray:
    """
    Normalizes the accepted label forms to an ``(n, num_classes)`` float matrix.

    Args:
        labels (Sequence[SoftLabel] | np.ndarray): SoftLabels or an already stacked matrix.

    Returns:
        np.ndarray: The stacked label matrix.
    """
    if isinstance(labels, np.ndarray):
        matrix = np.asarray(labels, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix[None, :]
        return matrix
    labels = list(labels)
    if not labels:
        raise LabelError("no labels given")
    return np.stack([label.probs for label in labels]).astype(np.float64)


def hard_classes(label_matrix: np.ndarray) -> np.ndarray:
    """Rows that are exactly one-hot map to their class; other rows map to -1."""
    is_hard = (np.count_nonzero(label_matrix == 1.0, axis=1) == 1) & (
        np.count_nonzero(label_matrix, axis=1) == 1
    )
    classes = np.argmax(label_matrix, axis=1)
    return np.where(is_hard, classes, -1)
