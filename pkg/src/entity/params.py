from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.services.errors import LayoutMismatchError


@dataclass(frozen=True)
class ParamSlot:
    """One named block of the flat parameter array."""

    name: str
    offset: int
    shape: tuple[int, ...]
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParamVector:
    """
    Flattened view of every weight of a model.

    ``values`` is a contiguous float64 array; ``layout`` is the per-layer offset table. Two
    vectors built for the same architecture share an identical layout, which is what every
    aggregation and optimizer routine checks before doing arithmetic.

    Batch-norm running statistics live in non-trainable slots so that they travel with the
    weights between clients and server.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: tuple[ParamSlot, ...]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise LayoutMismatchError("parameter values must be a flat array")
        expected = 0
        for slot in layout:
            if slot.offset != expected:
                raise LayoutMismatchError(
                    f"slot '{slot.name}' starts at {slot.offset}, expected {expected}"
                )
            expected = slot.stop
        if expected != values.size:
            raise LayoutMismatchError(
                f"layout covers {expected} values but the array holds {values.size}"
            )
        self.values = values
        self.layout = tuple(layout)

    @classmethod
    def from_arrays(
        cls, arrays: dict[str, np.ndarray], trainable: dict[str, bool] | None = None
    ) -> "ParamVector":
        """
        Packs named arrays into one vector, preserving the dict order.

        Args:
            arrays (dict[str, np.ndarray]): Named parameter blocks.
            trainable (dict[str, bool] | None): Optional trainable flags per name. Defaults to all trainable.

        Returns:
            ParamVector: The packed vector.
        """
        trainable = trainable or {}
        slots = []
        chunks = []
        offset = 0
        for name, array in arrays.items():
            array = np.asarray(array, dtype=np.float64)
            slot = ParamSlot(name, offset, tuple(array.shape), trainable.get(name, True))
            slots.append(slot)
            chunks.append(array.reshape(-1))
            offset = slot.stop
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(slots))

    @classmethod
    def zeros(cls, layout: tuple[ParamSlot, ...]) -> "ParamVector":
        size = layout[-1].stop if layout else 0
        return cls(np.zeros(size), layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def view(self, name: str) -> np.ndarray:
        """Returns the named block reshaped to its declared shape (a view, not a copy)."""
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset:slot.stop].reshape(slot.shape)
        raise KeyError(name)

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        for slot in self.layout:
            if slot.trainable:
                mask[slot.offset:slot.stop] = True
        return mask

    def with_values(self, updates: dict[str, np.ndarray]) -> "ParamVector":
        """Returns a copy with the named blocks replaced."""
        result = self.copy()
        for name, array in updates.items():
            result.view(name)[...] = array
        return result

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("parameter vectors come from different architectures")

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __len__(self) -> int:
        return self.values.size

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)

    def __repr__(self) -> str:
        return f"ParamVector(size={self.values.size}, slots={len(self.layout)})"
