class SimulatorError(Exception):
    """
    Base failure of the simulator.

    Carries a ``category`` (stable, machine readable) and a ``detail`` message, the same
    way an HTTP error carries a status code and a detail. The CLI maps the category to an
    exit code.
    """

    category = "simulator"

    def __init__(self, detail: str, category: str | None = None):
        super().__init__(detail)
        self.detail = detail
        if category is not None:
            self.category = category

    def __str__(self) -> str:
        return f"{self.category}: {self.detail}"


class ShapeMismatchError(SimulatorError):
    category = "shape"


class LayoutMismatchError(SimulatorError):
    category = "layout"


class LabelError(SimulatorError):
    category = "label"


class IdxFormatError(SimulatorError):
    """Raised by the IDX loader; ``category`` is one of ``magic``, ``truncated``, ``count``."""

    category = "idx"


class PartitionError(SimulatorError):
    category = "partition"


class AggregationError(SimulatorError):
    category = "aggregation"


class AttackError(SimulatorError):
    category = "attack"


class BotpaError(SimulatorError):
    category = "botpa"


class TrainingDivergedError(SimulatorError):
    category = "diverged"


class MetricError(SimulatorError):
    category = "metric"


class ConfigError(SimulatorError):
    category = "config"


class ExperimentError(SimulatorError):
    category = "experiment"


EXIT_CODES = {
    "config": 2,
    "idx": 3,
    "magic": 3,
    "truncated": 3,
    "count": 3,
    "shape": 4,
    "layout": 4,
    "label": 4,
    "partition": 5,
    "aggregation": 6,
    "attack": 7,
    "botpa": 8,
    "diverged": 9,
    "metric": 10,
    "experiment": 11,
    "simulator": 12,
}


def exit_code_for(error: SimulatorError) -> int:
    """
    Map a simulator error to its CLI exit code.

    Args:
        error (SimulatorError): The failure raised by a command.

    Returns:
        int: A nonzero exit code for the error category.
    """
    return EXIT_CODES.get(error.category, EXIT_CODES["simulator"])
