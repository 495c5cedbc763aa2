from dataclasses import dataclass, replace

from src.entity.params import ParamVector


@dataclass(frozen=True)
class ClientUpdate:
    """What a client reports to the server after a round of local training."""

    client_id: int
    delta: ParamVector
    num_samples: int
    malicious: bool = False

    def scaled(self, factor: float) -> "ClientUpdate":
        return replace(self, delta=self.delta * factor)
